import os
import sys

# make the shared helpers (fdcheck) importable regardless of invocation dir
sys.path.insert(0, os.path.dirname(__file__))

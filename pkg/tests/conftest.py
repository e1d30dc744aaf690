import sys
from pathlib import Path

# make the shared finite-difference oracle importable from every test module
sys.path.insert(0, str(Path(__file__).parent))

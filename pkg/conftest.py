import sys
from pathlib import Path

# Lets the tests import `modules` without installing the repository
sys.path.insert(0, str(Path(__file__).resolve().parent))

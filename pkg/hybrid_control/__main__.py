import sys

from hybrid_control.main import main

if __name__ == "__main__":
    sys.exit(main())

import sys

from hyperfl.cli import main

sys.exit(main())

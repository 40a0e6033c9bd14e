import sys

from fedload.cli import main

sys.exit(main())

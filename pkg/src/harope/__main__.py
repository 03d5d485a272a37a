import sys

from harope.cli import main

sys.exit(main())

import sys

from mdcs.runner.cli import main

sys.exit(main())

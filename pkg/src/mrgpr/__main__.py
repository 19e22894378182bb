import sys

from mrgpr.cli import main

sys.exit(main())

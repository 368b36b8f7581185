import sys

from revsep.cli import main

sys.exit(main())

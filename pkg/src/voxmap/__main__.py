import sys

from voxmap.cli import main

sys.exit(main())

import sys

from depthkit.cli import main

sys.exit(main())

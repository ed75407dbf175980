import sys

from worldprobe.cli import main

sys.exit(main())

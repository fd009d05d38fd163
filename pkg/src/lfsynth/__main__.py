import sys

from lfsynth.cli import main

sys.exit(main())

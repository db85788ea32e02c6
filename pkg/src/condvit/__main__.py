import sys

from condvit.cli import main

sys.exit(main())

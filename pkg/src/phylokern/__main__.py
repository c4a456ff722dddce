import sys

from phylokern.cli import main

sys.exit(main())

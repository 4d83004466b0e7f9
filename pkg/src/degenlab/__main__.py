import sys

from degenlab.cli import main

sys.exit(main())

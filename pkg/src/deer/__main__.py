import sys

from deer.cli import main

sys.exit(main())

import sys

from bess_lab.cli import main

sys.exit(main())

import sys

from bflsim.cli import main

sys.exit(main())

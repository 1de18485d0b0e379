import sys

from online_adp.cli import main

sys.exit(main())

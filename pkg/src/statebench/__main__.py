import sys

from statebench.cli import main

sys.exit(main())

import sys

from qinfer.cli import main

sys.exit(main())

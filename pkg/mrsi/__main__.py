import sys

from mrsi.cli import main

sys.exit(main())

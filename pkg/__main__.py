import sys

from fedtilt.cli import main

sys.exit(main())

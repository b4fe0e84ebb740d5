import sys

from nestmigration.cli import main

sys.exit(main())

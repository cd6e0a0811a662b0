import sys

from skinssl.cli import main

sys.exit(main())

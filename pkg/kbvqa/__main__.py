import sys

from kbvqa.cli import main

sys.exit(main())

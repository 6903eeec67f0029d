import sys

from textmotion.cli import main

sys.exit(main())

from transferlab.cli import main
import sys

sys.exit(main())

from vfboost.cli import main
import sys

sys.exit(main())

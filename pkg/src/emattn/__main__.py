import sys

from emattn.main import main

sys.exit(main())

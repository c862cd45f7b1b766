import sys
from .cohesion_groups import main

sys.exit(main())

#!/usr/bin/env python3

import sys
from cohesion_groups.cohesion_groups import main

if __name__ == '__main__':
    sys.exit(main())

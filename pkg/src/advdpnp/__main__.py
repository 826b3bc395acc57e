import sys

from advdpnp.cli import main

sys.exit(main())

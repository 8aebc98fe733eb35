import sys

from ps_rpc_bench.cli import main

sys.exit(main())

import sys

from svam.pipeline_cli import main

sys.exit(main())

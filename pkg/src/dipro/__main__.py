from dipro.cli import main
import sys
sys.exit(main())

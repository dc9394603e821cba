from dynaseg.cli import main

raise SystemExit(main())

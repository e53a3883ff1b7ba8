from pathprof.cli import main

main()

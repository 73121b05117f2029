# Command modules: each exposes register(subparsers)

from fedtilt.cli.main import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, build_parser, execute, main

__all__ = [
    "EXIT_CONFIG",
    "EXIT_OK",
    "EXIT_RUNTIME",
    "EXIT_VERIFY",
    "build_parser",
    "execute",
    "main",
]

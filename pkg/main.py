import sys

from src.presentation.cli import main as cli_main


def main() -> None:
    """
    Composition Root for tabenc.
    Every command wires its repositories inside the CLI handlers; this only forwards argv
    and turns the handler result into the process exit code.
    """
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()

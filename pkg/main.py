import sys

from dcls_audio.cli import main


if __name__ == "__main__":
    sys.exit(main())

"""Echo denoiser for exercising the external protocol: ``python -m srmra.echo_denoiser``."""

import sys

from .denoise import echo_main

if __name__ == "__main__":
    sys.exit(echo_main())

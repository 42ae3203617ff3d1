import logging
import os

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

dyadlab_logger = logging.getLogger("dyadlab")
dyadlab_logger.setLevel(os.getenv("DYADLAB_LOG_LEVEL", "INFO").upper())
dyadlab_logger.addHandler(logging.NullHandler())

# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

import json
import logging
import logging.config
import os
from logging import NullHandler

__version__ = "0.1.0"


def _setup_logging(logger: logging.Logger) -> None:
    log_path = os.environ.get("PYREPACK_LOG_CFG", None)

    if log_path is not None and os.path.exists(log_path):
        # log config from JSON file
        with open(log_path, "rt") as f:
            config = json.load(f)

        logging.config.dictConfig(config)
    else:
        # no logging was provided
        logger.addHandler(NullHandler())


logger = logging.getLogger(__name__)
_setup_logging(logger)

# Contains a list of features, used by external tooling to determine whether
# a new enough pyrepack is installed to support the file formats it needs
FEATURES = [
    "schema_v1",
    "dataset_family_column",
    "model_format_1",
]

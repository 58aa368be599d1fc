from loguru import logger

from fedtilt import baselines, config, data, fed_protocol, metrics, models, oracle, tilt_core

# Library code stays quiet until an application enables it, as the command line does.
logger.disable("fedtilt")

__all__ = [
    "baselines",
    "config",
    "data",
    "fed_protocol",
    "metrics",
    "models",
    "oracle",
    "tilt_core",
]

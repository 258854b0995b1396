"""Functions that can be called from an application to make life easy."""

from argparse import ArgumentParser
from logging import Formatter, Handler, LogRecord, getLogger
from pathlib import Path
from typing import Optional

from loguru import logger

from stretchcap.config.container_base import ConfigContainerBase
from stretchcap.config.pipeline import PipelineConfig


def config_filepath_from_cli(
    config_class: type[ConfigContainerBase] = PipelineConfig,
    parser: Optional[ArgumentParser] = None,
    short_option: str = "-c",
    long_option: str = "--config",
    load: bool = False,
) -> ArgumentParser:
    """Add a commandline option for the config file and set the filepath if it is given"""
    the_parser = parser or ArgumentParser()
    the_parser.add_argument(
        short_option,
        long_option,
        default=None,
        type=Path,
        help="Path of the configuration file (.json or .toml)",
    )
    args, _ = the_parser.parse_known_args()
    if cmdline_path := getattr(args, long_option[2:].replace("-", "_"), None):
        config_class.set_filepath(Path(cmdline_path), load=load)
    return the_parser


def use_standard_logging(enable: bool = False, fmt: Optional[Formatter] = None) -> None:
    """Propagate Loguru messages to standard logging"""

    class PropagateHandler(Handler):
        """Handler to propagate log records to standard logging"""

        def emit(self, record: LogRecord) -> None:
            """Let the standard logger handle the log record"""

            getLogger(record.name).handle(record)

    handler = PropagateHandler()
    handler.setFormatter(fmt)
    logger.remove()  # Remove all handlers added so far, including the default one.
    logger.add(handler, format="{message}")

    if enable:
        logger.enable(__package__)

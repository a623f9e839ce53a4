"""
This module contains utility functions for the `proto_miner` package.

The functions include:
- Defining custom exceptions for specific errors.
- Reading flat key-value configuration documents.
- Mapping a function over scenes with an optional thread pool while keeping
  the input order.
- Configuring the logging handlers of the command-line front end.
"""
from __future__ import annotations
import configparser
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

_CONFIG_SECTION = "mining"


class ConfigError(ValueError):
    """
    Raised when a mining configuration violates one of its invariants
    """


class FeatureError(ValueError):
    """
    Raised when a proposal feature cannot be normalized
    """


class DimensionError(ValueError):
    """
    Raised when array shapes disagree with the class count or feature size
    """


class MarginalError(ValueError):
    """
    Raised when transport marginals or similarities are invalid
    """


class WarmupError(RuntimeError):
    """
    Raised when prototype labels are requested from a bank still warming up
    """


class RotatedBoxError(ValueError):
    """
    Raised when an axis-aligned routine receives a yawed box
    """


class SchemaError(ValueError):
    """
    Raised when a file does not follow its exchange format
    """


class MissingGroundTruthError(ValueError):
    """
    Raised when label statistics are requested on scenes without ground truth
    """


class InvariantError(RuntimeError):
    """
    Raised when an internal post-condition does not hold
    """


def parse_config_text(text: str) -> dict[str, str]:
    """
    Parses a flat ``key = value`` document into a dictionary of strings.

    Parameters
    ----------
    text : str
        Content of the configuration file. Lines starting with ``#`` are
        comments.

    Returns
    -------
    dict of str
        Raw values keyed by field name, in file order.

    Raises
    ------
    ConfigError
        If a line is not a ``key = value`` pair or a key is repeated.

    Example
    -------
    >>> parse_config_text("kappa = 0.05\\nmu = 0.9")
    {'kappa': '0.05', 'mu': '0.9'}
    """
    logger.debug("Parsing flat configuration document")
    parser = configparser.ConfigParser(delimiters=("=",),
                                       comment_prefixes=("#",),
                                       interpolation=None)
    # keep field names case sensitive (K, C, O)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_CONFIG_SECTION}]\n{text}")
    except configparser.Error as exc:
        logger.info(f"Malformed configuration document: {exc}")
        raise ConfigError(f"malformed configuration: {exc}") from exc
    return dict(parser[_CONFIG_SECTION])


def read_config_file(path: str) -> dict[str, str]:
    """
    Reads a flat configuration file, see `parse_config_text`.
    """
    logger.debug(f"Reading configuration file {path}")
    with open(path, encoding="utf-8") as handle:
        return parse_config_text(handle.read())


def parallel_map(func: Callable[[T], R], items: Iterable[T],
                 jobs: int = 1) -> list[R]:
    """
    Applies `func` to every item, in parallel when `jobs` > 1.

    Results are always returned in input order, so outputs written from them
    do not depend on completion order.

    Parameters
    ----------
    func : callable
        Pure per-item function.
    items : iterable
        Items to process.
    jobs : int, optional
        Number of worker threads, by default 1 (sequential).

    Returns
    -------
    list
        ``[func(item) for item in items]``.
    """
    items = list(items)
    logger.debug(f"Mapping over {len(items)} items with jobs={jobs}")
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def setup_logging(verbosity: int = 0, log_file: str | None = None) -> None:
    """
    Configures the root logger for command-line runs.

    Parameters
    ----------
    verbosity : int, optional
        0 for warnings, 1 for info, 2 or more for debug messages.
    log_file : str, optional
        Path of a log file; messages go to standard error when omitted.
    """
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity,
                                                      logging.DEBUG)
    logging.basicConfig(filename=log_file, level=level, force=True,
                        format="%(levelname)s:%(name)s:%(message)s")

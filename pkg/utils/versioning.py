"""
Version comparison utilities for config schemas and cached fields
"""

import re
from typing import Tuple, Union

LIBRARY_VERSION = "0.3.0"
SCHEMA_VERSION = 1


def parse_version(version_str: Union[str, int, None]) -> Tuple[int, ...]:
    """
    Parse a version string into a tuple of integers for comparison.

    Args:
        version_str: Version like "1.2.3", "v1.2" or a bare schema number 1

    Returns:
        Tuple of three integers (major, minor, patch)
    """
    if version_str is None or version_str == "":
        return (0, 0, 0)

    text = str(version_str).lstrip('v')
    version_tuple = tuple(int(num) for num in re.findall(r'\d+', text))

    # Pad with zeros to ensure consistent comparison
    while len(version_tuple) < 3:
        version_tuple = version_tuple + (0,)

    return version_tuple[:3]


def is_newer_version(current_version: Union[str, int], new_version: Union[str, int]) -> bool:
    """True if new_version is newer than current_version."""
    return parse_version(new_version) > parse_version(current_version)


def format_version_display(version_str: Union[str, int, None]) -> str:
    if version_str is None or version_str == "":
        return "Unknown"
    return f"v{'.'.join(str(n) for n in parse_version(version_str))}"

from pathlib import Path

PYPROJECT = Path(__file__).resolve().parent.parent / "pyproject.toml"


def get_project_field(key: str, default: str = "unknown") -> str:
    """
    Retrieves a top-level ``[project]`` field from the pyproject.toml file.

    Args:
        key: Field name, e.g. ``name`` or ``version``.
        default: Returned when the file or field is missing.

    Returns:
        str: The field value without quotes.
    """
    try:
        with open(PYPROJECT) as f:
            for line in f:
                name, sep, value = line.partition("=")
                if sep and name.strip() == key:
                    return value.strip().strip('"')
    except OSError:
        pass
    return default


def get_version() -> str:
    """
    Retrieves the version number from the pyproject.toml file.

    Returns:
        str: The version number.
    """
    return get_project_field("version")

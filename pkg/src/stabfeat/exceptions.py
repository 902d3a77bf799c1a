class FormatError(ValueError):
    """A file did not match its declared on-disk layout.

    ``position`` is a byte offset for binary formats or a 1-based line number
    for text formats, when one is known.
    """

    def __init__(self, message: str, path=None, position: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if position is not None:
                where += f":{position}"
            where += ": "
        elif position is not None:
            where = f"at {position}: "
        super().__init__(where + message)
        self.path = path
        self.position = position


class DegenerateConfigurationError(ValueError):
    """Point configuration does not determine a unique model."""

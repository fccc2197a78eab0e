"""Exception hierarchy.

Everything raised on purpose by this package derives from ``DualViewError``.
The CLI maps ``BackendFailure`` to exit code 2 and every other subclass to 1.
"""

from __future__ import annotations


class DualViewError(Exception):
    pass


class InvalidValue(DualViewError, ValueError):
    """A domain type was constructed with values that break its invariants."""


class NoOverlap(DualViewError):
    """A box (or mapped strip) lies entirely outside the image."""


class BadManifest(DualViewError):
    pass


class MissingPair(DualViewError):
    """A main-view image has no auxiliary partner on disk, or vice versa."""


class BadAnnotation(DualViewError):
    pass


class ParseError(DualViewError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnknownScene(DualViewError):
    pass


class UnknownCategory(DualViewError):
    pass


class EmptyInput(DualViewError):
    pass


class DegenerateInput(DualViewError):
    pass


class MissingScene(DualViewError):
    """A precomputed detection file has no entry for the queried scene."""


class BackendFailure(DualViewError):
    def __init__(self, message: str, *, scene_id: str | None = None, diagnostics: str = ""):
        self.scene_id = scene_id
        self.diagnostics = diagnostics
        text = message if scene_id is None else f"[scene {scene_id}] {message}"
        if diagnostics:
            text += f"\n--- backend diagnostics ---\n{diagnostics}"
        super().__init__(text)


class DatasetIOError(DualViewError, OSError):
    pass

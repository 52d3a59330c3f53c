"""Exception types shared across the package."""


class MillforgeError(Exception):
    """Base class for millforge failures."""


class EmptyShapeError(MillforgeError):
    """The level set has no zero crossing: the shape vanished."""


class FloatingStructureError(MillforgeError):
    """The elastic system is singular because a component is unconstrained."""

    def __init__(self, message, component_nodes=None):
        super().__init__(message)
        self.component_nodes = component_nodes

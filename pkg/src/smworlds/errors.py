class NumericalAbort(RuntimeError):
    """A numerical invariant was violated; ``invariant`` names it."""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"[{invariant}] {message}")
        self.invariant = invariant


class BranchExplosion(NumericalAbort):
    def __init__(self, count: int, cap: int):
        super().__init__("branch_count", f"decomposition produced {count} branches (cap {cap})")
        self.count = count

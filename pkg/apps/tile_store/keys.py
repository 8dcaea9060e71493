from dataclasses import dataclass


@dataclass(frozen=True, order=True)
class TileKey:
    """Signed tile index; tile (ix, iy) covers map cells [ix*edge, (ix+1)*edge) x [iy*edge, ...)."""

    ix: int
    iy: int

    def __str__(self):
        return f"({self.ix},{self.iy})"

    @property
    def filename(self) -> str:
        return f"tile_{self.ix}_{self.iy}.nmpt"

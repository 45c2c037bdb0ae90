"""Pixel geometry of the two patch grids.

An image of width W and height H is upsampled by an integer factor f and
cut into an f x f grid. Cell (r, c), counted row-major from the top-left,
covers pixel rows [r*H, (r+1)*H) and columns [c*W, (c+1)*W) of the
upsampled image, so every cell is exactly the original image's size and
the cells tile the upsampled image with no gap or overlap. The mid scale
uses f = n and the high scale f = 2n; high cell (R, C) lies inside mid
cell (R // 2, C // 2) once both are expressed at the same resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import SpecError

__all__ = ["Region", "grid_regions", "parent_index"]


@dataclass(frozen=True)
class Region:
    """Half-open pixel rectangle: rows [top, bottom), columns [left, right)."""

    top: int
    left: int
    bottom: int
    right: int

    def __post_init__(self) -> None:
        if not (0 <= self.top < self.bottom and 0 <= self.left < self.right):
            raise SpecError(f"degenerate region {self}")

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top

    def box(self) -> tuple[int, int, int, int]:
        """The rectangle as an image-library crop box (left, top, right, bottom)."""
        return (self.left, self.top, self.right, self.bottom)

    def scaled(self, factor: int) -> "Region":
        """The same rectangle at ``factor`` times the resolution."""
        if factor < 1:
            raise SpecError(f"scale factor must be >= 1, got {factor}")
        return Region(self.top * factor, self.left * factor,
                      self.bottom * factor, self.right * factor)

    def contains(self, other: "Region") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and other.bottom <= self.bottom and other.right <= self.right)


def grid_regions(width: int, height: int, factor: int) -> list[Region]:
    """Row-major cells of the ``factor`` x ``factor`` grid.

    The regions address the image upsampled by ``factor``, whose size is
    (width * factor, height * factor); each cell is width x height.
    """
    if width < 1 or height < 1:
        raise SpecError(f"image size must be positive, got {width}x{height}")
    if factor < 1:
        raise SpecError(f"grid factor must be >= 1, got {factor}")
    return [
        Region(r * height, c * width, (r + 1) * height, (c + 1) * width)
        for r in range(factor)
        for c in range(factor)
    ]


def parent_index(high_index: int, n: int) -> int:
    """Row-major mid-grid index of the cell containing a high-grid cell.

    The high grid is 2n x 2n and the mid grid n x n; high cell
    (R, C) = divmod(high_index, 2n) maps to mid cell (R // 2, C // 2).
    """
    if n < 1:
        raise SpecError(f"partition factor must be >= 1, got {n}")
    if not 0 <= high_index < 4 * n * n:
        raise SpecError(
            f"high index must lie in [0, {4 * n * n}), got {high_index}"
        )
    row, col = divmod(high_index, 2 * n)
    return (row // 2) * n + col // 2

"""Pixel <-> feature-cell bridge.

Feature grids are coarser than images. A pixel maps to the cell that covers
it (floor), and a cell maps back to the pixel at its center.
"""

import math

from .errors import BoundsError


def pixel_to_cell(x: int, y: int, image_width: int, image_height: int,
                  grid_width: int, grid_height: int) -> tuple[int, int]:
    if not (0 <= x < image_width and 0 <= y < image_height):
        raise BoundsError(f"pixel ({x}, {y}) outside image {image_width}x{image_height}")
    return (x * grid_width) // image_width, (y * grid_height) // image_height


def cell_to_pixel(x_f: int, y_f: int, image_width: int, image_height: int,
                  grid_width: int, grid_height: int) -> tuple[int, int]:
    if not (0 <= x_f < grid_width and 0 <= y_f < grid_height):
        raise BoundsError(f"cell ({x_f}, {y_f}) outside grid {grid_width}x{grid_height}")
    return (math.floor((x_f + 0.5) * image_width / grid_width),
            math.floor((y_f + 0.5) * image_height / grid_height))

"""
Acquisition layer: synthetic slides, tile preprocessing and bag storage.
"""
from .tiles import TileBag
from .bag_format import read_bag, write_bag

__all__ = ['TileBag', 'read_bag', 'write_bag']

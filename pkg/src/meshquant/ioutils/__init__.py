from .sectioned import SectionFile
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint

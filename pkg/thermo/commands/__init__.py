from .sweep import command as sweep
from .collapse import command as collapse
from .report import command as report
from .dos import command as dos

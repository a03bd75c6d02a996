from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional, Union

from tortoise import Tortoise, fields, connections
from tortoise.models import Model

TORTOISE_ORM = {
    "connections": {"default": "sqlite://runs/sweep.sqlite3"},
    "apps": {
        "models": {
            "models": ["meshquant.database.models", "aerich.models"],
            "default_connection": "default",
        },
    },
}

PENDING, RUNNING, DONE, FAILED = 'pending', 'running', 'done', 'failed'


class SweepPoint(Model):
    id = fields.IntField(pk=True)
    # grid point
    name = fields.CharField(max_length=64)
    seed = fields.IntField()
    mode = fields.CharField(max_length=16)
    levels = fields.CharField(max_length=64)
    ratios = fields.CharField(max_length=255)
    config_hash = fields.CharField(max_length=64)
    # outcome
    status = fields.CharField(max_length=16, default=PENDING)
    val_loss = fields.FloatField(null=True)
    rel_l2 = fields.FloatField(null=True)
    macs_int8eq = fields.FloatField(null=True)
    aux_macs = fields.FloatField(null=True)
    steps = fields.IntField(null=True)
    metrics_csv = fields.CharField(max_length=1024, null=True)
    error = fields.TextField(null=True)

    class Meta:
        unique_together = (("name", "seed"),)

    def is_finished(self, config_hash: str) -> bool:
        return self.status == DONE and self.config_hash == config_hash


async def init(db_path: Union[str, Path] = 'runs/sweep.sqlite3'):
    await Tortoise.init(
        db_url=f'sqlite://{db_path}',
        modules={'models': ['meshquant.database.models']},
        _enable_global_fallback=True,
    )
    await Tortoise.generate_schemas()


async def shutdown():
    await connections.close_all()


@asynccontextmanager
async def connect(db_path: Union[str, Path] = 'runs/sweep.sqlite3'):
    await init(db_path)
    try:
        yield
    finally:
        await shutdown()


async def register_point(name: str, seed: int, mode: str, levels: str, ratios: str,
                         config_hash: str, resume: bool = True) -> tuple[SweepPoint, bool]:
    """
    Get or create the row of (name, seed); returns it and whether it still has to run.
    With ``resume`` a finished row of the same config hash is kept, anything else is reset.
    """
    point, created = await SweepPoint.get_or_create(
        {'mode': mode, 'levels': levels, 'ratios': ratios, 'config_hash': config_hash},
        name=name, seed=seed,
    )
    if resume and not created and point.is_finished(config_hash):
        return point, False
    await point.update_from_dict({
        'mode': mode, 'levels': levels, 'ratios': ratios, 'config_hash': config_hash,
        'status': PENDING, 'error': None, 'val_loss': None, 'rel_l2': None,
        'macs_int8eq': None, 'aux_macs': None, 'steps': None,
    }).save()
    return point, True


async def mark_running(point: SweepPoint):
    point.status = RUNNING
    await point.save()


async def record_result(point: SweepPoint, row: dict, metrics_csv: Optional[str] = None):
    await point.update_from_dict({
        'status': DONE, 'error': None, 'steps': int(row['step']),
        'val_loss': float(row['val_loss']), 'rel_l2': float(row['rel_l2']),
        'macs_int8eq': float(row['macs_int8eq']), 'aux_macs': float(row['aux_macs']),
        'metrics_csv': metrics_csv,
    }).save()


async def record_failure(point: SweepPoint, error: str):
    point.status = FAILED
    point.error = error
    await point.save()


async def list_points() -> list[SweepPoint]:
    return await SweepPoint.all().order_by('name', 'seed')

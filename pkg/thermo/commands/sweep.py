import asyncio
import os

import click

from ..cache import get_cache
from ..exceptions import PartialFailure
from ..models import CachePolicy, RunStatus
from ..services.processing import MANIFEST, load_run_config, run_sweep


@click.command("sweep")
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", default=None, help="Output directory (default: output_dir from the config).")
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--cache", "cache_policy", type=click.Choice([p.value for p in CachePolicy]), default=None)
@click.option("--cache-dir", default=None, help="Overrides THERMO_CACHE_DIR.")
def command(config_path, out_dir, workers, cache_policy, cache_dir):
    """Run every (J, B) point of a YAML run config and write curves plus a manifest."""
    config = load_run_config(config_path)
    if cache_policy:
        config = config.model_copy(update={"cache": CachePolicy(cache_policy)})
    out_dir = out_dir or config.output_dir

    records = asyncio.run(run_sweep(config, get_cache(cache_dir), out_dir=out_dir, workers=workers))

    counts = {}
    for record in records:
        counts[record.status] = counts.get(record.status, 0) + 1
    summary = ", ".join(f"{n} {status}" for status, n in sorted(counts.items()))
    click.echo(f"{len(records)} point(s): {summary}; manifest {os.path.join(out_dir, MANIFEST)}")

    failed = [r.curve_id for r in records if r.status == RunStatus.FAILED]
    if failed:
        raise PartialFailure(failed)

"""Command-line interface.

All data commands are thin clients of the HTTP service: with --url they
talk to a running `bitsnap serve` instance, otherwise they run the same
app in-process over an ASGI transport. `serve` and `agent` are the two
long-running entry points.
"""

from __future__ import annotations

import json
import signal
import sys

import click
import httpx


def _client(url: str | None) -> httpx.Client:
    if url:
        return httpx.Client(base_url=url, timeout=600.0)
    # In-process mode: drive the ASGI app directly.
    from starlette.testclient import TestClient

    from .service.app import app

    return TestClient(app)


def _post(ctx, path: str, payload: dict) -> dict:
    with _client(ctx.obj.get("url")) as client:
        resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(f"{path} failed: {detail}")
    return resp.json()


@click.group()
@click.option("--url", default=None, envvar="BITSNAP_URL",
              help="Base URL of a running bitsnap service; in-process if unset.")
@click.pass_context
def main(ctx, url):
    ctx.ensure_object(dict)
    ctx.obj["url"] = url


@main.command()
@click.option("--root", required=True, help="Checkpoint store root directory.")
@click.option("--iter", "iteration", type=int, default=None,
              help="Override the iteration recorded in the input file.")
@click.option("--input", "input_path", required=True,
              help="Checkpoint file (.bsnp container).")
@click.option("--max-cached-iteration", type=int, default=1, show_default=True,
              help="Checkpoints between base refreshes.")
@click.option("--clusters", type=int, default=16, show_default=True,
              help="Quantizer cluster count m (2..16).")
@click.pass_context
def save(ctx, root, iteration, input_path, max_cached_iteration, clusters):
    """Compress and save a checkpoint into the store."""
    out = _post(ctx, "/store/save", {
        "root": root,
        "input_path": input_path,
        "iteration": iteration,
        "max_cached_iteration": max_cached_iteration,
        "quantizer_clusters": clusters,
    })
    click.echo(
        f"saved iteration {out['iteration']} as {out['kind']} "
        f"(base {out['base_iteration']}, {out['tensors_bytes']} tensor bytes)"
    )


@main.command()
@click.option("--root", required=True)
@click.option("--iter", "iteration", type=int, default=None,
              help="Iteration to load; latest if omitted.")
@click.option("--output", "output_path", required=True,
              help="Where to write the reconstructed checkpoint file.")
@click.pass_context
def load(ctx, root, iteration, output_path):
    """Reconstruct a checkpoint from the store."""
    out = _post(ctx, "/store/load", {
        "root": root,
        "iteration": iteration,
        "output_path": output_path,
    })
    click.echo(
        f"loaded iteration {out['iteration']} ({out['model_tensors']} model, "
        f"{out['optimizer_tensors']} optimizer tensors) -> {out['output_path']}"
    )


@main.command()
@click.option("--root", required=True)
@click.pass_context
def inspect(ctx, root):
    """Show tracker state and the checkpoint chain."""
    click.echo(json.dumps(_post(ctx, "/store/inspect", {"root": root}), indent=2))


@main.command()
@click.option("--input", "input_path", required=True)
@click.option("--base", "base_path", default=None,
              help="Previous checkpoint; enables the delta path.")
@click.option("--weights", default="0.2,0.4,0.4", show_default=True,
              help="w1,w2,w3 for ratio, speed, precision.")
@click.option("--json", "json_out", default=None, help="Write the report here.")
@click.option("--clusters", type=int, default=16, show_default=True)
@click.option("--repeats", type=int, default=20, show_default=True)
@click.option("--warmup", type=int, default=5, show_default=True)
@click.pass_context
def bench(ctx, input_path, base_path, weights, json_out, clusters, repeats, warmup):
    """Measure compression ratio, speed and precision; emit the Q report."""
    try:
        w = tuple(float(x) for x in weights.split(","))
        if len(w) != 3:
            raise ValueError
    except ValueError:
        raise click.ClickException("--weights must be three comma-separated numbers")
    out = _post(ctx, "/bench", {
        "input_path": input_path,
        "base_path": base_path,
        "weights": w,
        "clusters": clusters,
        "repeats": repeats,
        "warmup": warmup,
    })
    text = json.dumps(out, indent=2)
    if json_out:
        with open(json_out, "w") as f:
            f.write(text + "\n")
    click.echo(text)


@main.command("agent-status")
@click.option("--slots-file", required=True)
@click.pass_context
def agent_status(ctx, slots_file):
    """Print the state of every slot in a staging region."""
    out = _post(ctx, "/engine/status", {"slots_file": slots_file})
    click.echo(out["report"])


@main.command("simulate-crash")
@click.option("--scenario", default="lost-rank", show_default=True)
@click.option("--workdir", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def simulate_crash(ctx, scenario, workdir, seed):
    """Run a scripted failure scenario and print the recovery trace."""
    out = _post(ctx, "/engine/simulate-crash", {
        "scenario": scenario,
        "workdir": workdir,
        "seed": seed,
    })
    for line in out["trace"]:
        click.echo(line)
    click.echo(f"chosen iteration: {out['chosen_iteration']}")


@main.command()
@click.option("--root", required=True, help="Parent directory of per-rank stores.")
@click.option("--slots-file", required=True)
@click.option("--ranks", type=int, default=1, show_default=True)
@click.option("--redundancy", type=int, default=2, show_default=True)
@click.option("--capacity", type=int, default=16 * 1024 * 1024, show_default=True,
              help="Per-slot byte capacity when creating the region.")
def agent(root, slots_file, ranks, redundancy, capacity):
    """Run the persistence agent until interrupted."""
    from pathlib import Path

    from .engine import AsyncAgent, SlotRegion

    path = Path(slots_file)
    if path.exists():
        region = SlotRegion.open(path)
    else:
        region = SlotRegion.create(path, ranks=ranks, redundancy=redundancy,
                                   capacity=capacity)
        click.echo(f"created slot region {path}")
    agent = AsyncAgent(region, root)
    agent.start()
    click.echo(f"agent running over {path}; Ctrl-C to stop")
    try:
        signal.pause()
    except (KeyboardInterrupt, AttributeError):
        pass
    finally:
        agent.stop()
        region.close()
        for err in agent.errors:
            click.echo(f"error: {err}", err=True)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("bitsnap.service.app:app", host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def stage1():
    """Default demonstrations with a trained world model and exported latents."""
    from hdflow import pipeline
    from hdflow.config import RunConfig

    return pipeline.run_stage1(RunConfig())


@pytest.fixture(scope="session")
def trained(stage1):
    """Default planner trained on the default latents, with its training time in seconds."""
    import time

    from hdflow import pipeline
    from hdflow.config import RunConfig

    t0 = time.perf_counter()
    planner, curves = pipeline.run_stage2(RunConfig(), stage1.records, stage1.wm.checksum())
    return planner, curves, time.perf_counter() - t0


@pytest.fixture(scope="session")
def small_ini(tmp_path_factory):
    """Config file for a seconds-scale run of every command."""
    from dataclasses import replace

    from hdflow.config import RunConfig, render_config
    from hdflow.diffusion import GuidanceConfig

    c = RunConfig()
    c = replace(
        c,
        data=replace(c.data, n_success=4, n_fail=2),
        world_model=replace(c.world_model, epochs=3, d_h=8, d_e=8, hidden=16, proj_dim=4),
        guidance=GuidanceConfig(sample_steps=10, k_neighbors=3),
        planner=replace(c.planner, iterations=30, hidden=(16,), ebm_hidden=(8,), proj_every=10, proj_batch=1,
                        proj_sample_steps=3, log_every=10, max_env_steps=20),
        seeds=replace(c.seeds, episodes=2),
    )
    path = tmp_path_factory.mktemp("config") / "small.ini"
    path.write_text(render_config(c))
    return path

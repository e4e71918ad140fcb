"""Session fixtures: one trained micro model shared by the behavior tests.

Training the small configuration on the synthetic tone task takes a few
minutes, so it happens once per session; every test that needs trained
behavior (loss convergence, listening suppression, magnitude dials) reads
from the same instance.  The recipe is fixed end to end (task seed, model
seed, batch stream, three learning-rate phases) so results are reproducible
run to run.
"""

import numpy as np
import pytest
import torch

from faceflow.flow import euler_integrate
from faceflow.microtask import WINDOW_FRAMES, MicroTask
from faceflow.motion import LISTEN, MOTION_DIM
from faceflow.training import FaceFlowModel, make_optimizer, train_step

TRAINING_PHASES = ((2600, 2e-3, 100), (1000, 4e-4, 0), (800, 1e-4, 0))
TRAINING_BATCH = 16


def _tensor(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


class TrainedMicro:
    """Trained model, its task, and window-level sampling helpers."""

    def __init__(self, task: MicroTask, model: FaceFlowModel, loss_history: list):
        self.task = task
        self.model = model
        self.loss_history = loss_history  # per-step totals, all phases concatenated

    def sample_window(self, sample, x0, magnitude=None, history_coeffs=None,
                      history_states=None, steps: int = 4) -> np.ndarray:
        """Integrate the trained field over one window of the synthetic task.

        ``magnitude`` and the history default to the sample's own values;
        overriding them probes the conditioning dials.
        """
        mag = sample.magnitude if magnitude is None else np.asarray(magnitude, dtype=np.float64)
        hist_c = sample.history_coeffs if history_coeffs is None else history_coeffs
        hist_s = sample.history_states if history_states is None else history_states
        with torch.no_grad():
            local, glob = self.model.fusion(_tensor(sample.audio_layers).unsqueeze(0))

        def field(x, t, _c):
            with torch.no_grad():
                v = self.model.field(
                    _tensor(x).unsqueeze(0), local, glob,
                    _tensor(hist_c).unsqueeze(0), _tensor(hist_s).unsqueeze(0),
                    _tensor(sample.current_states).unsqueeze(0),
                    torch.zeros(1, 100, dtype=torch.float64),
                    torch.zeros(1, MOTION_DIM, dtype=torch.float64),
                    _tensor(mag).unsqueeze(0),
                    torch.tensor([t], dtype=torch.float64),
                )
            return v[0].numpy()

        return euler_integrate(field, x0, steps=steps)

    def generate_conversation(self, seed: int, noise_seed: int, steps: int = 4):
        """Rolling-history generation over one held-out conversation.

        Returns (conversation, generated coefficients); the history fed to
        each window is the model's own previous output, cold-started at
        zeros with listening states, exactly as the engine would run.
        """
        conv = self.task.eval_conversation(seed=seed)
        samples = self.task.eval_samples(conv)
        nrng = np.random.default_rng(noise_seed)
        hist_len = self.task.config.history_len
        hist_c = np.zeros((hist_len, MOTION_DIM))
        hist_s = np.full(hist_len, float(LISTEN))
        gen = []
        for s in samples:
            x0 = nrng.standard_normal((WINDOW_FRAMES, MOTION_DIM))
            xw = self.sample_window(s, x0, history_coeffs=hist_c,
                                    history_states=hist_s, steps=steps)
            gen.append(xw)
            hist_c = np.concatenate([hist_c, xw])[-hist_len:]
            hist_s = np.concatenate([hist_s, s.current_states.astype(np.float64)])[-hist_len:]
        return conv, np.concatenate(gen)


@pytest.fixture(scope="session")
def trained_micro() -> TrainedMicro:
    torch.set_num_threads(1)
    task = MicroTask(seed=11, conversations=24, windows_per_conversation=8)
    model = FaceFlowModel(task.config, seed=0)
    optimizer = make_optimizer(model, lr=TRAINING_PHASES[0][1])
    rng = np.random.default_rng(0)
    history = []
    for steps, lr, warmup in TRAINING_PHASES:
        for step in range(steps):
            batch = task.batch(rng, TRAINING_BATCH)
            out = train_step(model, batch, optimizer, stage=1, step=step,
                             lr=lr, warmup_steps=warmup)
            history.append(out["total"])
    model.eval()
    return TrainedMicro(task, model, history)

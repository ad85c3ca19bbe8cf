"""Two-state corridor MDP used as a value-iteration oracle for the DQN learner.

State 0 sits at the left exit, state 1 at the right exit. DECREASE from
state 0 leaves on the left for +1.5; INCREASE from state 1 leaves on the
right for +1. The other moves walk along the corridor (or stay put) for 0.
"""
import numpy as np

from hbcidrive import dqn, nn

GAMMA = 0.5
ARCH = nn.Architecture(input_shape=(3, 8, 8), conv=((4, 3, 1), (4, 2, 2)),
                       hidden=16, n_actions=3)

# (state, action) -> (reward, next state or None when the episode ends)
MODEL = {
    (0, 0): (0.0, 1), (0, 1): (0.0, 0), (0, 2): (1.5, None),
    (1, 0): (1.0, None), (1, 1): (0.0, 1), (1, 2): (0.0, 0),
}


def observation(state):
    obs = np.zeros(ARCH.input_shape, dtype=np.float32)
    if state == 0:
        obs[:, :4] = 1.0
    elif state == 1:
        obs[:, 4:] = 1.0
    return obs


def value_iteration(gamma=GAMMA, tol=1e-12):
    Q = np.zeros((2, 3))
    while True:
        V = Q.max(axis=1)
        new = np.array([[r + (0.0 if s2 is None else gamma * V[s2])
                         for r, s2 in (MODEL[s, a] for a in range(3))] for s in range(2)])
        if np.max(np.abs(new - Q)) < tol:
            return new
        Q = new


def train(seed=0, steps=3000, sync_every=50):
    config = dqn.TrainConfig(gamma=GAMMA, batch_size=6, lr=1e-3, td_clip=10.0,
                             sync_every=sync_every)
    online = nn.QNetwork(ARCH, seed=seed)
    target = online.copy()
    buffer = dqn.ReplayBuffer(len(MODEL), ARCH.input_shape)
    for (s, a), (r, s2) in MODEL.items():
        buffer.add(dqn.Transition(observation(s), a, r,
                                  observation(s2 if s2 is not None else -1), s2 is None))
    opt = nn.OptimizerState(lr=config.lr)
    rng = np.random.default_rng(seed)
    for t in range(1, steps + 1):
        dqn.train_step(online, target, buffer, opt, config, rng)
        if t % config.sync_every == 0:
            dqn.sync_target(online, target)
    return online


def learned_q(net):
    return net.forward(np.stack([observation(0), observation(1)])).astype(np.float64)

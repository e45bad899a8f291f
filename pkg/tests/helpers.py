"""Shared test utilities: gradient checking and tiny corpus builders."""

import torch


def central_difference_gradcheck(net, loss_fn, h=1e-5, floor=1e-2):
    """Max relative error between autograd and central finite differences.

    ``loss_fn()`` must evaluate the loss from the net's current parameters.
    The relative error uses a small magnitude floor so near-zero gradients
    are compared absolutely. The net must be in double precision and free
    of stochastic layers (dropout p=0).
    """
    net.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for param in net.parameters():
        analytic = param.grad.detach().clone()
        flat = param.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            with torch.no_grad():
                up = loss_fn().item()
            flat[i] = orig - step
            with torch.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            fd[i] = (up - down) / (2 * step)
        fd = fd.view_as(analytic)
        rel = (analytic - fd).abs() / torch.clamp(
            torch.maximum(analytic.abs(), fd.abs()), min=floor)
        worst = max(worst, float(rel.max()))
    return worst


def random_motion(rng, t, n=3):
    return rng.normal(size=(t, n, 3))


def make_aligned_sample(rng, piece_id="piece", performer_id="P1", t=120,
                        n_mels=32, n_joints=75, frame_rate=30.0):
    """Random but valid AlignedSample for plumbing tests."""
    from violinmotion.audio_features import MelConfig, MelSpectrogram
    from violinmotion.dataset_io import AlignedSample
    from violinmotion.labels import NoteEvent, events_to_frames
    from violinmotion.motion_model import MotionSequence

    events = []
    t_s = 0.0
    while t_s < t / frame_rate - 0.4:
        dur = rng.uniform(0.2, 0.6)
        events.append(NoteEvent(
            onset_s=t_s, offset_s=t_s + dur,
            bow=int(rng.integers(1, 3)), string=int(rng.integers(1, 5)),
            finger=int(rng.integers(1, 6)), position=int(rng.integers(1, 13))))
        t_s += dur + rng.uniform(0.0, 0.3)
    labels = events_to_frames(events, frame_rate, t)
    return AlignedSample(
        mel=MelSpectrogram(data=rng.normal(size=(t, n_mels)),
                           config=MelConfig(n_mels=n_mels)),
        labels=labels,
        motion=MotionSequence(data=rng.normal(size=(t, n_joints, 3)),
                              frame_rate=frame_rate),
        frame_rate=frame_rate,
        piece_id=piece_id, performer_id=performer_id)

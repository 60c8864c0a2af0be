"""Independent central-difference gradient oracle shared by the gradient tests."""
import torch

STEP = 1e-3
RTOL = 1e-3
ATOL_FLOOR = 1e-6


def central_difference(fn, tensor: torch.Tensor, index: tuple, step: float = STEP) -> float:
    """d fn() / d tensor[index] by (f(x+h) - f(x-h)) / 2h, perturbing ``tensor`` in place."""
    with torch.no_grad():
        original = tensor[index].item()
        tensor[index] = original + step
        up = fn().item()
        tensor[index] = original - step
        down = fn().item()
        tensor[index] = original
    return (up - down) / (2 * step)


def autodiff(fn, tensor: torch.Tensor, index: tuple) -> float:
    if tensor.grad is not None:
        tensor.grad = None
    fn().backward()
    return tensor.grad[index].item()


def grad_matches(fd: float, ad: float) -> bool:
    return abs(fd - ad) <= max(RTOL * abs(ad), ATOL_FLOOR)


def random_indices(shape, count: int, seed: int) -> list[tuple]:
    g = torch.Generator().manual_seed(seed)
    return [tuple(int(torch.randint(0, s, (1,), generator=g)) for s in shape) for _ in range(count)]


# acceptance bookkeeping: criterion number -> (title, [(check, passed, detail)])
ACCEPTANCE: dict[int, tuple[str, list]] = {}


def record_check(criterion: int, title: str, check: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, (title, []))[1].append((check, bool(passed), detail))
    return bool(passed)


def acceptance_lines() -> list[str]:
    lines = []
    for number in sorted(ACCEPTANCE):
        title, checks = ACCEPTANCE[number]
        ok = all(passed for _, passed, _ in checks)
        lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} "
                     f"({sum(p for _, p, _ in checks)}/{len(checks)} checks)")
        for check, passed, detail in checks:
            if detail or not passed:
                lines.append(f"    {'ok  ' if passed else 'FAIL'} {check}: {detail}")
    return lines

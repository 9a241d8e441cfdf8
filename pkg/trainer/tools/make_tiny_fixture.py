#!/usr/bin/env python3
"""Build the tiny 2-level / 4-filter fixture archive plus golden tensors.

The archive and the golden input/output pair are committed under the main
package's tests/fixtures/tiny_unet so its inference tests run without this
trainer installed. The golden output comes from the torch forward pass.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gantrainer.export import export_generator  # noqa: E402
from gantrainer.model import PlanNet, build_generator_plan  # noqa: E402


def main() -> None:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("tiny_unet")
    torch.manual_seed(123)
    plan = build_generator_plan(depth=2, first_filters=4, in_channels=1)
    net = PlanNet(plan)

    # keep outputs comfortably positive so the final clamp is not all-zero
    with torch.no_grad():
        final_conv = [m for m in net.ops if isinstance(m, torch.nn.Conv2d)][-1]
        final_conv.bias.fill_(0.1)

    # populate batch-norm running statistics with non-trivial values
    net.train()
    with torch.no_grad():
        for _ in range(8):
            net(torch.rand(4, 1, 32, 32, generator=torch.Generator().manual_seed(7)))
    net.eval()

    export_generator(net, out_dir, train_size=64, input_channels=1)

    rng = np.random.default_rng(2024)
    golden_in = rng.random((32, 32)).astype(np.float32)
    with torch.no_grad():
        golden_out = net(torch.from_numpy(golden_in)[None, None]).numpy()[0, 0]
    np.save(out_dir / "golden_input.npy", golden_in)
    np.save(out_dir / "golden_output.npy", golden_out)
    print(f"fixture written to {out_dir}")
    print(f"golden output stats: min {golden_out.min():.6f} max {golden_out.max():.6f}")


if __name__ == "__main__":
    main()

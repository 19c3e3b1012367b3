"""Parameter, memory and FLOPs accounting for both networks.

Costs are computed from the layer list alone, so this runs instantly even for
the full 176x176 models. FLOPs depend on the counting rule, and the script
shows all three rules the calculator supports.
"""
from adensemble import architectures as A

ir = A.build_ir_brainnet()
dem = A.build_modified_demnet()

for g in (ir, dem):
    total, trainable = A.param_count(g)
    mem = A.memory_bytes(g)
    print(f"{g.name:16s} params {total:>10,} (trainable {trainable:,})  "
          f"memory {mem:,} bytes = {mem / 2**20:.2f} MiB")

print("\nIR-BRAINNET filter widths:", A.IR_FILTERS)
print("conv2 holds", f"{A.layer_param_count(ir, 'conv2'):,}", "parameters, the shape of VGG-19 block2_conv1")

print("\nGFLOPs per image under each counting rule:")
print(f"{'rule':8s} {'IR':>8s} {'DEMNET':>8s} {'ensemble':>9s}")
for conv in A.FLOP_CONVENTIONS:
    reports = [A.flop_count(ir, conv), A.flop_count(dem, conv)]
    ens = A.ensemble_cost(reports)
    print(f"{conv:8s} {reports[0].gflops:8.4f} {reports[1].gflops:8.4f} {ens.gflops:9.4f}")

print("\nreference figures:", ", ".join(f"{k} {v}" for k, v in A.REFERENCE_GFLOPS.items()))
conv2 = next(r for r in A.flop_count(ir).per_layer if r["name"] == "conv2")
print(f"twice the default conv2 count: {2 * conv2['flops'] / 1e9:.4f} G")

# The most expensive layers of IR-BRAINNET, default rule.
print("\nheaviest IR-BRAINNET layers:")
for row in sorted(A.flop_count(ir).per_layer, key=lambda r: -r["flops"])[:3]:
    print(f"  {row['name']:6s} {row['flops']:>15,}")

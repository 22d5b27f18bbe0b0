//! Fixtures shared by the benchmarks.

use fedm_core::federation::{partition, ClientShard, PartitionScheme};
use fedm_core::model::{generate_dataset, Family, ModelSpec, TrueParameter};

/// `m` equal shards of `m * local_n` samples from the default model.
pub fn shards(family: Family, d: usize, m: usize, local_n: usize, seed: u64) -> (ModelSpec, Vec<ClientShard>) {
    let spec = ModelSpec::with_defaults(family, d, 1.0).expect("valid model");
    let data = generate_dataset(&spec, &TrueParameter::cyclic_default(d), m * local_n, 1.0, seed).expect("data");
    let shards = partition(&data, m, &PartitionScheme::Equal, seed).expect("partition");
    (spec, shards)
}

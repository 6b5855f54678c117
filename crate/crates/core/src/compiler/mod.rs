//! Register allocation, chaining and binary emission.

pub mod binary;
pub mod chain;
pub mod regalloc;

pub use binary::{disassemble, emit_binary, to_asm};
pub use chain::{chain_instructions, ChainSet, ChainedBlock, Dep, DepKind};
pub use regalloc::allocate_registers;

use crate::arch::{ClusterConfig, DeviceConfig};
use crate::codegen::{generate_program, Program};
use crate::error::Result;
use crate::mapper::{map_cluster, MemoryMap, Partition};
use crate::model::ModelConfig;

/// Allocate, chain and check one device program.
pub fn compile_program(program: &Program, device: &DeviceConfig) -> Result<ChainSet> {
    let alloc = allocate_registers(
        program,
        device.vector_registers(),
        device.scalar_registers(),
        device.lmu_bytes,
    )?;
    chain_instructions(&alloc)
}

/// Everything needed to run one model on a cluster.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub partition: Partition,
    pub maps: Vec<MemoryMap>,
    pub chains: Vec<ChainSet>,
}

/// Map, generate and compile a model for every device of one ring. Rings of a
/// multi-ring partition run identical replicas.
pub fn compile_cluster(config: &ModelConfig, cluster: &ClusterConfig) -> Result<Compiled> {
    cluster.validate()?;
    let (partition, maps) = map_cluster(config, &cluster.device, cluster.devices_per_ring())?;
    let chains = maps
        .iter()
        .map(|m| {
            let p = generate_program(config, m, &partition, cluster)?;
            compile_program(&p, &cluster.device)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Compiled {
        partition,
        maps,
        chains,
    })
}

//! Placement of model parameters and KV cache in device memory.
//!
//! Weight matrices are stored `in x out` and cut into `v x l` tiles. A tile
//! is laid out column-major so each of its `l` columns (one MAC tree's
//! operand vector) is `v` contiguous FP16 values. Tiles of a matrix are
//! ordered column-set-major with row tiles inner, which is also the order
//! the SXE consumes them in. Device memory is interleaved across channels
//! at tile granularity, so any contiguous run of tiles visits the channels
//! round-robin.
//!
//! Attention weights are split across devices by head and FFN weights by
//! column (FC1) and row (FC2). Norms and embeddings are replicated. The
//! Key cache is stored as `K^T` (head_dim x positions): writing a token's
//! key fills one tile column, and streaming the region yields `K^T` tiles
//! directly.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;

use half::f16;

use crate::arch::{DeviceConfig, FP16_BYTES};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParamStore, Role, TensorId};

/// Per-device slices of a model under intra-layer parallelism.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub n_devices: usize,
    /// Attention heads owned by each device.
    pub heads: Vec<Range<usize>>,
    /// FC1 output columns (and FC2 input rows) owned by each device.
    pub ffn: Vec<Range<usize>>,
    /// Norms, embeddings and the LM head are present on every device.
    pub replicate_globals: bool,
}

impl Partition {
    pub fn needs_sync(&self) -> bool {
        self.n_devices > 1
    }
}

pub fn partition_model(config: &ModelConfig, n_devices: usize) -> Result<Partition> {
    if ![1, 2, 4, 8].contains(&n_devices) {
        return Err(Error::InvalidDeviceCount(n_devices));
    }
    // heads padded up to a multiple of the device count; trailing devices
    // may own fewer real heads
    let per = config.num_heads.div_ceil(n_devices);
    let heads = (0..n_devices)
        .map(|i| (i * per).min(config.num_heads)..((i + 1) * per).min(config.num_heads))
        .collect();
    let chunk = config.ffn_dim.div_ceil(n_devices);
    let ffn = (0..n_devices)
        .map(|i| (i * chunk).min(config.ffn_dim)..((i + 1) * chunk).min(config.ffn_dim))
        .collect();
    Ok(Partition {
        n_devices,
        heads,
        ffn,
        replicate_globals: true,
    })
}

/// Tile grid for a `rows x cols` matrix: `(row_tiles, col_tiles)`.
pub fn tile_tensor(rows: usize, cols: usize, v: usize, l: usize) -> (usize, usize) {
    (rows.div_ceil(v), cols.div_ceil(l))
}

/// Byte offset of element `(row, col)` inside a tiled matrix whose tile grid
/// has `row_tiles` rows.
pub fn tiled_offset(row: usize, col: usize, row_tiles: usize, v: usize, l: usize) -> u64 {
    let tile = (col / l) * row_tiles + row / v;
    let within = (col % l) * v + row % v;
    (tile * v * l + within) as u64 * FP16_BYTES
}

/// Where a tiled region's values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixSource {
    pub tensor: TensorId,
    pub row_off: usize,
    pub col_off: usize,
    /// Read the source tensor transposed (tied LM head over the embedding).
    pub transpose: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionKind {
    /// Tiled `rows x cols` weight matrix.
    Matrix {
        rows: usize,
        cols: usize,
        src: MatrixSource,
    },
    /// Contiguous vector (bias or norm parameters).
    Vector {
        len: usize,
        tensor: TensorId,
        offset: usize,
    },
    /// Row-major lookup table (positional or untied token embedding).
    Table {
        rows: usize,
        cols: usize,
        tensor: TensorId,
    },
    /// Transposed Key cache of one layer: per head a tiled
    /// `head_dim x max_seq` matrix.
    KvKey { heads: usize, head_dim: usize, max_seq: usize },
    /// Value cache of one layer: per head a tiled `max_seq x head_dim` matrix.
    KvValue { heads: usize, head_dim: usize, max_seq: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: u16,
    /// Tensor this region is looked up by, if any.
    pub key: Option<TensorId>,
    pub name: String,
    pub kind: RegionKind,
    pub base: u64,
    pub bytes: u64,
}

/// One tile placement, as listed in the memory map dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub region: u16,
    pub tile_row: usize,
    pub tile_col: usize,
    pub device: usize,
    pub channel: u32,
    pub address: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMap {
    pub device: usize,
    pub v: usize,
    pub l: usize,
    pub num_channels: u32,
    pub burst_bytes: u64,
    pub regions: Vec<Region>,
    pub total_bytes: u64,
    by_tensor: HashMap<TensorId, u16>,
    kv: Vec<(u16, u16)>,
}

impl MemoryMap {
    /// Rebuild a map from its region table.
    pub fn from_regions(
        device: usize,
        v: usize,
        l: usize,
        num_channels: u32,
        burst_bytes: u64,
        regions: Vec<Region>,
        total_bytes: u64,
    ) -> Result<MemoryMap> {
        let mut by_tensor = HashMap::new();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            if r.id as usize != i {
                return Err(Error::MalformedBinary(format!("region {} listed at {i}", r.id)));
            }
            if let Some(k) = r.key {
                by_tensor.insert(k, r.id);
            }
            match r.kind {
                RegionKind::KvKey { .. } => keys.push(r.id),
                RegionKind::KvValue { .. } => values.push(r.id),
                _ => {}
            }
        }
        if keys.len() != values.len() {
            return Err(Error::MalformedBinary("unpaired KV regions".into()));
        }
        Ok(MemoryMap {
            device,
            v,
            l,
            num_channels,
            burst_bytes,
            regions,
            total_bytes,
            by_tensor,
            kv: keys.into_iter().zip(values).collect(),
        })
    }

    pub fn tile_bytes(&self) -> u64 {
        (self.v * self.l) as u64 * FP16_BYTES
    }

    pub fn channel_of(&self, address: u64) -> u32 {
        ((address / self.tile_bytes()) % self.num_channels as u64) as u32
    }

    pub fn region(&self, id: u16) -> Result<&Region> {
        self.regions
            .get(id as usize)
            .ok_or_else(|| Error::IndexOutOfRange(format!("region {id}")))
    }

    pub fn region_for(&self, tensor: TensorId) -> Option<&Region> {
        self.by_tensor.get(&tensor).map(|&i| &self.regions[i as usize])
    }

    /// Region holding the `d x vocab` LM head (the embedding when tied).
    pub fn lm_head_region(&self) -> Option<&Region> {
        self.region_for(TensorId::global(Role::LmHead))
    }

    pub fn kv_regions(&self, layer: usize) -> Result<(&Region, &Region)> {
        let &(k, v) = self
            .kv
            .get(layer)
            .ok_or_else(|| Error::IndexOutOfRange(format!("layer {layer}")))?;
        Ok((&self.regions[k as usize], &self.regions[v as usize]))
    }

    /// Tile grid `(row_tiles, col_tiles)` of a region's matrix (per head for KV).
    pub fn grid(&self, region: &Region) -> (usize, usize) {
        match region.kind {
            RegionKind::Matrix { rows, cols, .. } => tile_tensor(rows, cols, self.v, self.l),
            RegionKind::KvKey { head_dim, max_seq, .. } => tile_tensor(head_dim, max_seq, self.v, self.l),
            RegionKind::KvValue { head_dim, max_seq, .. } => tile_tensor(max_seq, head_dim, self.v, self.l),
            RegionKind::Vector { .. } | RegionKind::Table { .. } => (0, 0),
        }
    }

    fn kv_head_bytes(&self, region: &Region) -> u64 {
        let (r, c) = self.grid(region);
        (r * c) as u64 * self.tile_bytes()
    }

    /// Address of `element` of the Key or Value written at `position` for a
    /// device-local head, inside a KV region.
    pub fn kv_element_address(&self, region: &Region, head: usize, position: usize, element: usize) -> Result<u64> {
        let (heads, head_dim, max_seq, key) = match region.kind {
            RegionKind::KvKey { heads, head_dim, max_seq } => (heads, head_dim, max_seq, true),
            RegionKind::KvValue { heads, head_dim, max_seq } => (heads, head_dim, max_seq, false),
            _ => return Err(Error::IndexOutOfRange(format!("{} is not a KV region", region.name))),
        };
        if head >= heads || position >= max_seq || element >= head_dim {
            return Err(Error::IndexOutOfRange(format!(
                "{} h{head} p{position} e{element}",
                region.name
            )));
        }
        let (row_tiles, _) = self.grid(region);
        let (row, col) = if key { (element, position) } else { (position, element) };
        Ok(region.base + head as u64 * self.kv_head_bytes(region) + tiled_offset(row, col, row_tiles, self.v, self.l))
    }

    /// Address of element `element` of the Key written at `position` for a
    /// device-local head of `layer`.
    pub fn kv_key_address(&self, layer: usize, head: usize, position: usize, element: usize) -> Result<u64> {
        self.kv_element_address(self.kv_regions(layer)?.0, head, position, element)
    }

    /// Address of element `element` of the Value written at `position`.
    pub fn kv_value_address(&self, layer: usize, head: usize, position: usize, element: usize) -> Result<u64> {
        self.kv_element_address(self.kv_regions(layer)?.1, head, position, element)
    }

    /// Base address of one head's sub-matrix inside a KV region.
    pub fn kv_head_base(&self, region: &Region, head: usize) -> u64 {
        region.base + head as u64 * self.kv_head_bytes(region)
    }

    /// Stream of tile addresses for a matrix region, in SXE consumption order.
    pub fn matrix_stream(&self, region: &Region) -> Vec<u64> {
        let (r, c) = self.grid(region);
        (0..r * c).map(|t| region.base + t as u64 * self.tile_bytes()).collect()
    }

    /// Stream for reading `K^T` of one head over positions `0..len`.
    pub fn key_stream(&self, layer: usize, head: usize, len: usize) -> Result<Vec<u64>> {
        let (k, _) = self.kv_regions(layer)?;
        let (r, _) = self.grid(k);
        let base = k.base + head as u64 * self.kv_head_bytes(k);
        let cols = len.div_ceil(self.l);
        Ok((0..cols * r).map(|t| base + t as u64 * self.tile_bytes()).collect())
    }

    /// Stream for reading `V` of one head over positions `0..len`.
    pub fn value_stream(&self, layer: usize, head: usize, len: usize) -> Result<Vec<u64>> {
        let (_, v) = self.kv_regions(layer)?;
        let (r_max, c) = self.grid(v);
        let base = v.base + head as u64 * self.kv_head_bytes(v);
        let rows = len.div_ceil(self.v);
        let mut out = Vec::with_capacity(rows * c);
        for col in 0..c {
            for row in 0..rows {
                out.push(base + (col * r_max + row) as u64 * self.tile_bytes());
            }
        }
        Ok(out)
    }

    /// All tiles of tiled regions, each region in stream order.
    pub fn tiles(&self) -> impl Iterator<Item = Tile> + '_ {
        self.regions.iter().flat_map(move |reg| {
            let (r, c) = self.grid(reg);
            let heads = match reg.kind {
                RegionKind::KvKey { heads, .. } | RegionKind::KvValue { heads, .. } => heads,
                RegionKind::Matrix { .. } => 1,
                _ => 0,
            };
            (0..heads * r * c).map(move |t| {
                let within = t % (r * c);
                let address = reg.base + t as u64 * self.tile_bytes();
                Tile {
                    region: reg.id,
                    tile_row: within % r,
                    tile_col: within / r,
                    device: self.device,
                    channel: self.channel_of(address),
                    address,
                }
            })
        })
    }

    /// Bytes occupied by parameters (everything except the KV cache).
    pub fn weight_bytes(&self) -> u64 {
        self.regions
            .iter()
            .filter(|r| !matches!(r.kind, RegionKind::KvKey { .. } | RegionKind::KvValue { .. }))
            .map(|r| r.bytes)
            .sum()
    }

    /// Every mapped parameter element as `(tensor, row, col, address)`.
    /// Intended for small models.
    pub fn element_addresses(&self) -> Vec<(TensorId, usize, usize, u64)> {
        let mut out = Vec::new();
        for reg in &self.regions {
            match reg.kind {
                RegionKind::Matrix { rows, cols, src } => {
                    let (rt, _) = self.grid(reg);
                    for r in 0..rows {
                        for c in 0..cols {
                            let (sr, sc) = if src.transpose {
                                (src.row_off + c, src.col_off + r)
                            } else {
                                (src.row_off + r, src.col_off + c)
                            };
                            out.push((src.tensor, sr, sc, reg.base + tiled_offset(r, c, rt, self.v, self.l)));
                        }
                    }
                }
                RegionKind::Vector { len, tensor, offset } => {
                    for i in 0..len {
                        out.push((tensor, 0, offset + i, reg.base + i as u64 * FP16_BYTES));
                    }
                }
                RegionKind::Table { rows, cols, tensor } => {
                    for r in 0..rows {
                        for c in 0..cols {
                            out.push((tensor, r, c, reg.base + (r * cols + c) as u64 * FP16_BYTES));
                        }
                    }
                }
                RegionKind::KvKey { .. } | RegionKind::KvValue { .. } => {}
            }
        }
        out
    }

    /// Build the device memory image holding every mapped parameter. KV
    /// regions are zero. Intended for small models.
    pub fn load_image(&self, params: &ParamStore) -> Result<Vec<u8>> {
        let mut image = vec![0u8; self.total_bytes as usize];
        for (tensor, r, c, addr) in self.element_addresses() {
            let t = params.tensor(tensor)?;
            let x = t.at(r, c);
            image[addr as usize..addr as usize + 2].copy_from_slice(&x.to_le_bytes());
        }
        Ok(image)
    }

    /// Tile-level CSV dump: `tensor,tile_row,tile_col,device,channel,address`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tensor,tile_row,tile_col,device,channel,address")?;
        for t in self.tiles() {
            writeln!(
                w,
                "{},{},{},{},{},{:#x}",
                self.regions[t.region as usize].name,
                t.tile_row,
                t.tile_col,
                t.device,
                t.channel,
                t.address
            )?;
        }
        Ok(())
    }

    /// Region-level CSV summary: `id,name,kind,base,bytes`.
    pub fn write_region_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id,name,kind,base,bytes")?;
        for r in &self.regions {
            let kind = match r.kind {
                RegionKind::Matrix { .. } => "matrix",
                RegionKind::Vector { .. } => "vector",
                RegionKind::Table { .. } => "table",
                RegionKind::KvKey { .. } => "kv_key",
                RegionKind::KvValue { .. } => "kv_value",
            };
            writeln!(w, "{},{},{},{:#x},{}", r.id, r.name, kind, r.base, r.bytes)?;
        }
        Ok(())
    }
}

struct Allocator {
    cursor: u64,
    regions: Vec<Region>,
    tile_bytes: u64,
    stripe: u64,
    burst: u64,
}

impl Allocator {
    fn push(&mut self, key: Option<TensorId>, name: String, kind: RegionKind, bytes: u64, tiled: bool) -> Result<u16> {
        let align = if tiled { self.stripe } else { self.burst };
        self.cursor = self.cursor.div_ceil(align) * align;
        let id = u16::try_from(self.regions.len())
            .ok()
            .filter(|&i| i < (1 << 14))
            .ok_or_else(|| Error::InvalidConfig("more than 16384 memory regions".into()))?;
        let bytes = if tiled {
            bytes.div_ceil(self.tile_bytes) * self.tile_bytes
        } else {
            bytes.div_ceil(self.burst) * self.burst
        };
        self.regions.push(Region {
            id,
            key,
            name,
            kind,
            base: self.cursor,
            bytes,
        });
        self.cursor += bytes;
        Ok(id)
    }
}

/// Lay out one device's share of the model.
pub fn map_device(
    partition: &Partition,
    config: &ModelConfig,
    device_cfg: &DeviceConfig,
    device: usize,
) -> Result<MemoryMap> {
    config.validate()?;
    if device >= partition.n_devices {
        return Err(Error::IndexOutOfRange(format!("device {device}")));
    }
    let v = device_cfg.vector_dim as usize;
    let l = device_cfg.mac_trees as usize;
    let hd = config.head_dim();
    if !hd.is_multiple_of(l) {
        return Err(Error::InvalidConfig(format!(
            "head_dim {hd} is not a multiple of the MAC tree count {l}"
        )));
    }
    let tile_bytes = (v * l) as u64 * FP16_BYTES;
    let mut a = Allocator {
        cursor: 0,
        regions: Vec::new(),
        tile_bytes,
        stripe: tile_bytes * device_cfg.num_channels as u64,
        burst: device_cfg.burst_bytes as u64,
    };
    let d = config.d_model;
    let heads = partition.heads[device].clone();
    let ffn = partition.ffn[device].clone();
    let qcols = heads.start * hd..heads.end * hd;
    let n_local_heads = heads.len();

    let matrix = |a: &mut Allocator, id: TensorId, rows: usize, cols: usize, src: MatrixSource| -> Result<()> {
        if rows == 0 || cols == 0 {
            return Ok(());
        }
        let (rt, ct) = tile_tensor(rows, cols, v, l);
        a.push(
            Some(id),
            id.to_string(),
            RegionKind::Matrix { rows, cols, src },
            (rt * ct) as u64 * tile_bytes,
            true,
        )?;
        Ok(())
    };
    let plain = |tensor, row_off, col_off| MatrixSource {
        tensor,
        row_off,
        col_off,
        transpose: false,
    };

    // Globals: LM head (which doubles as the token table when tied),
    // embedding table when untied, positional table.
    let lm = TensorId::global(Role::LmHead);
    if config.tie_embeddings {
        let src = MatrixSource {
            tensor: TensorId::global(Role::Embed),
            row_off: 0,
            col_off: 0,
            transpose: true,
        };
        matrix(&mut a, lm, d, config.vocab_size, src)?;
    } else {
        matrix(&mut a, lm, d, config.vocab_size, plain(lm, 0, 0))?;
        let e = TensorId::global(Role::Embed);
        a.push(
            Some(e),
            e.to_string(),
            RegionKind::Table { rows: config.vocab_size, cols: d, tensor: e },
            (config.vocab_size * d) as u64 * FP16_BYTES,
            false,
        )?;
    }
    if config.pos_encoding == crate::model::PosEncoding::Learned {
        let p = TensorId::global(Role::Pos);
        a.push(
            Some(p),
            p.to_string(),
            RegionKind::Table { rows: config.max_seq, cols: d, tensor: p },
            (config.max_seq * d) as u64 * FP16_BYTES,
            false,
        )?;
    }

    let vector = |a: &mut Allocator, id: TensorId, len: usize, offset: usize| -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        a.push(
            Some(id),
            id.to_string(),
            RegionKind::Vector { len, tensor: id, offset },
            len as u64 * FP16_BYTES,
            false,
        )?;
        Ok(())
    };

    for layer in 0..config.num_layers {
        let t = |role| TensorId::layer(layer, role);
        vector(&mut a, t(Role::Norm1), config.norm_width(), 0)?;
        for (w, b) in [(Role::Q, Role::QBias), (Role::K, Role::KBias), (Role::V, Role::VBias)] {
            matrix(&mut a, t(w), d, qcols.len(), plain(t(w), 0, qcols.start))?;
            if config.biases {
                vector(&mut a, t(b), qcols.len(), qcols.start)?;
            }
        }
        matrix(&mut a, t(Role::O), qcols.len(), d, plain(t(Role::O), qcols.start, 0))?;
        // row-parallel biases are added once, by device 0
        if config.biases && device == 0 {
            vector(&mut a, t(Role::OBias), d, 0)?;
        }
        vector(&mut a, t(Role::Norm2), config.norm_width(), 0)?;
        matrix(&mut a, t(Role::Fc1), d, ffn.len(), plain(t(Role::Fc1), 0, ffn.start))?;
        if config.biases {
            vector(&mut a, t(Role::Fc1Bias), ffn.len(), ffn.start)?;
        }
        matrix(&mut a, t(Role::Fc2), ffn.len(), d, plain(t(Role::Fc2), ffn.start, 0))?;
        if config.biases && device == 0 {
            vector(&mut a, t(Role::Fc2Bias), d, 0)?;
        }
    }
    vector(&mut a, TensorId::global(Role::FinalNorm), config.norm_width(), 0)?;

    // KV cache, head-partitioned with the attention weights, preallocated
    // at max_seq.
    for layer in 0..config.num_layers {
        let s = config.max_seq;
        let (kr, kc) = tile_tensor(hd, s, v, l);
        let (vr, vc) = tile_tensor(s, hd, v, l);
        a.push(
            None,
            format!("l{layer}.kcache"),
            RegionKind::KvKey { heads: n_local_heads, head_dim: hd, max_seq: s },
            (n_local_heads * kr * kc) as u64 * tile_bytes,
            true,
        )?;
        a.push(
            None,
            format!("l{layer}.vcache"),
            RegionKind::KvValue { heads: n_local_heads, head_dim: hd, max_seq: s },
            (n_local_heads * vr * vc) as u64 * tile_bytes,
            true,
        )?;
    }

    let total_bytes = a.cursor;
    if total_bytes > device_cfg.hbm_capacity {
        return Err(Error::CapacityExceeded {
            deficit: total_bytes - device_cfg.hbm_capacity,
        });
    }
    MemoryMap::from_regions(
        device,
        v,
        l,
        device_cfg.num_channels,
        device_cfg.burst_bytes as u64,
        a.regions,
        total_bytes,
    )
}

/// Map every device of an `n`-way partition, checking the cluster-level fit first.
pub fn map_cluster(
    config: &ModelConfig,
    device_cfg: &DeviceConfig,
    n_devices: usize,
) -> Result<(Partition, Vec<MemoryMap>)> {
    let cluster = crate::arch::ClusterConfig::single_ring(device_cfg.clone(), n_devices)?;
    crate::arch::validate_fit(
        model::model_bytes(config),
        model::kv_bytes(config, config.max_seq),
        &cluster,
    )?;
    let partition = partition_model(config, n_devices)?;
    let maps = (0..n_devices)
        .map(|dev| map_device(&partition, config, device_cfg, dev))
        .collect::<Result<Vec<_>>>()?;
    Ok((partition, maps))
}

/// Read an FP16 value from a memory image.
pub fn read_f16(image: &[u8], addr: u64) -> f16 {
    let a = addr as usize;
    f16::from_le_bytes([image[a], image[a + 1]])
}

pub fn write_f16(image: &mut [u8], addr: u64, x: f16) {
    let a = addr as usize;
    image[a..a + 2].copy_from_slice(&x.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn partition_examples() {
        let c = presets::model("opt-1.3b").unwrap();
        let p = partition_model(&c, 4).unwrap();
        assert!(p.heads.iter().all(|h| h.len() == 8));
        let p = partition_model(&c, 1).unwrap();
        assert_eq!(p.heads, vec![0..32]);
        assert!(!p.needs_sync());
        let c = presets::model("opt-66b").unwrap();
        let p = partition_model(&c, 8).unwrap();
        assert!(p.heads.iter().all(|h| h.len() == 9));
        assert!(matches!(partition_model(&c, 3), Err(Error::InvalidDeviceCount(3))));
    }

    #[test]
    fn uneven_heads_are_padded() {
        let c = presets::model("tiny-2l").unwrap();
        let p = partition_model(&c, 4).unwrap();
        assert_eq!(p.heads, vec![0..1, 1..2, 2..2, 2..2]);
        let covered: usize = p.ffn.iter().map(|r| r.len()).sum();
        assert_eq!(covered, c.ffn_dim);
    }

    #[test]
    fn tile_grid_examples() {
        assert_eq!(tile_tensor(2048, 8192, 64, 32), (32, 256));
        assert_eq!(tile_tensor(64, 32, 64, 32), (1, 1));
        assert_eq!(tile_tensor(100, 100, 64, 32), (2, 4));
    }

    #[test]
    fn regions_are_burst_aligned_and_disjoint() {
        let c = presets::model("tiny-2l").unwrap();
        let d = presets::device("hbm3-x4").unwrap();
        let p = partition_model(&c, 2).unwrap();
        let m = map_device(&p, &c, &d, 1).unwrap();
        let mut prev_end = 0;
        for r in &m.regions {
            assert_eq!(r.base % d.burst_bytes as u64, 0);
            assert!(r.base >= prev_end);
            prev_end = r.base + r.bytes;
        }
        // row-parallel biases live only on device 0
        assert!(m.region_for(TensorId::layer(0, Role::OBias)).is_none());
    }

    #[test]
    fn key_stride_between_positions() {
        let c = presets::model("tiny-2l").unwrap();
        let d = presets::device("hbm3-x4").unwrap();
        let p = partition_model(&c, 1).unwrap();
        let m = map_device(&p, &c, &d, 0).unwrap();
        let base = m.kv_key_address(1, 1, 0, 0).unwrap();
        let (k, _) = m.kv_regions(1).unwrap();
        let row_tiles = c.head_dim().div_ceil(m.v);
        let head_bytes = (row_tiles * c.max_seq.div_ceil(m.l)) as u64 * m.tile_bytes();
        assert_eq!(base, k.base + head_bytes);
        for pos in 0..(3 * m.l) {
            let a = m.kv_key_address(1, 1, pos, 0).unwrap();
            let b = m.kv_key_address(1, 1, pos + 1, 0).unwrap();
            let expect = if (pos + 1) % m.l == 0 {
                row_tiles as u64 * m.tile_bytes() - ((m.l - 1) * m.v) as u64 * FP16_BYTES
            } else {
                (m.v as u64) * FP16_BYTES
            };
            assert_eq!(b - a, expect, "pos {pos}");
        }
        assert!(m.kv_key_address(0, 2, 0, 0).is_err());
        assert!(m.kv_key_address(0, 0, c.max_seq, 0).is_err());
    }

    #[test]
    fn capacity_is_checked() {
        let c = presets::model("opt-66b").unwrap();
        let d = presets::device("hbm3-x4").unwrap();
        let p = partition_model(&c, 1).unwrap();
        assert!(matches!(map_device(&p, &c, &d, 0), Err(Error::CapacityExceeded { .. })));
    }
}

use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IffArchConfig {
    /// RA blocks per branch; one interaction module follows each.
    pub blocks: usize,
    /// Channels inside the branches.
    pub filters: usize,
    pub ra_kernel: usize,
    pub upconv_kernel: usize,
    pub interaction_kernel: usize,
    pub merge_kernel: usize,
    pub merge_filters: usize,
}

impl Default for IffArchConfig {
    fn default() -> Self {
        Self::sized(4, 64)
    }
}

impl IffArchConfig {
    /// Kernel sizes of the reference architecture with the given depth and width.
    pub fn sized(blocks: usize, filters: usize) -> Self {
        Self {
            blocks,
            filters,
            ra_kernel: 3,
            upconv_kernel: 1,
            interaction_kernel: 1,
            merge_kernel: 3,
            merge_filters: 4,
        }
    }

    /// Small configuration used for desk-scale training runs.
    pub fn desk() -> Self {
        Self::sized(2, 16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.filters == 0 || self.merge_filters == 0 {
            return Err(Error::invalid(
                "arch",
                "blocks, filters and merge_filters must be positive",
            ));
        }
        for (name, k) in [
            ("ra_kernel", self.ra_kernel),
            ("upconv_kernel", self.upconv_kernel),
            ("interaction_kernel", self.interaction_kernel),
            ("merge_kernel", self.merge_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::invalid(
                    "arch",
                    format!("{name} must be odd, got {k}"),
                ));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("arch.blocks", self.blocks);
        kv.set("arch.filters", self.filters);
        kv.set("arch.ra_kernel", self.ra_kernel);
        kv.set("arch.upconv_kernel", self.upconv_kernel);
        kv.set("arch.interaction_kernel", self.interaction_kernel);
        kv.set("arch.merge_kernel", self.merge_kernel);
        kv.set("arch.merge_filters", self.merge_filters);
    }

    /// Overrides fields present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        let fields: [(&str, &mut usize); 7] = [
            ("arch.blocks", &mut self.blocks),
            ("arch.filters", &mut self.filters),
            ("arch.ra_kernel", &mut self.ra_kernel),
            ("arch.upconv_kernel", &mut self.upconv_kernel),
            ("arch.interaction_kernel", &mut self.interaction_kernel),
            ("arch.merge_kernel", &mut self.merge_kernel),
            ("arch.merge_filters", &mut self.merge_filters),
        ];
        for (key, slot) in fields {
            if let Some(v) = kv.get(key)? {
                *slot = v;
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        cfg.validate()
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(cfg)
    }
}

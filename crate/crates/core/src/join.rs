//! Zero-padding residual joins.
//!
//! When both paths of a residual block keep their own channel selections,
//! the elementwise add happens in the full pre-pruned channel space: each
//! path is scattered into a zero tensor at its channels' original identities
//! (masks say which identities are live, index maps say where each packed
//! position lands), the two scatters add, and the result is re-packed into
//! the join's canonical channel order for downstream consumption.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Everything one zero-padded join needs at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinMetadata {
    /// Full pre-pruned channel count of the join's identity space.
    pub full_size: usize,
    /// Which identity channels the main path selected.
    pub mask_main: Vec<bool>,
    /// Which identity channels the shortcut path selected.
    pub mask_shortcut: Vec<bool>,
    /// Packed main position -> identity channel.
    pub index_main: Vec<u32>,
    /// Packed shortcut position -> identity channel.
    pub index_shortcut: Vec<u32>,
    /// Canonical output order: packed output position -> identity channel
    /// (full length; the first `out_count` positions are consumed
    /// downstream).
    pub pack: Vec<u32>,
    pub out_count: usize,
    /// Packed main position -> packed output position (derived).
    pub scatter_main: Vec<u32>,
    /// Packed shortcut position -> packed output position (derived).
    pub scatter_shortcut: Vec<u32>,
}

impl JoinMetadata {
    fn validate(&self) -> Result<()> {
        let popcount = |m: &[bool]| m.iter().filter(|&&b| b).count();
        if popcount(&self.mask_main) != self.index_main.len()
            || popcount(&self.mask_shortcut) != self.index_shortcut.len()
        {
            return Err(Error::Invalid(String::from(
                "join mask popcount does not match its index map",
            )));
        }
        for &i in self.index_main.iter().chain(self.index_shortcut.iter()) {
            if i as usize >= self.full_size {
                return Err(Error::IndexOutOfRange {
                    at: String::from("join index map"),
                    index: i as usize,
                    limit: self.full_size,
                });
            }
        }
        Ok(())
    }
}

/// Build metadata from explicit per-path selections.
///
/// `perms` are the per-path sorted orders (position -> identity) introduced
/// by channel sorting; without them the index maps are the selections in
/// ascending identity order and the pack is the identity order itself.
pub fn build_join_metadata(
    full_size: usize,
    selection_main: &[u32],
    selection_shortcut: &[u32],
    perms: Option<(&[u32], &[u32])>,
) -> Result<JoinMetadata> {
    let mut mask_main = vec![false; full_size];
    let mut mask_shortcut = vec![false; full_size];
    for &c in selection_main {
        if c as usize >= full_size {
            return Err(Error::IndexOutOfRange {
                at: String::from("selection_main"),
                index: c as usize,
                limit: full_size,
            });
        }
        mask_main[c as usize] = true;
    }
    for &c in selection_shortcut {
        if c as usize >= full_size {
            return Err(Error::IndexOutOfRange {
                at: String::from("selection_shortcut"),
                index: c as usize,
                limit: full_size,
            });
        }
        mask_shortcut[c as usize] = true;
    }
    let ordered = |mask: &[bool], perm: Option<&[u32]>| -> Vec<u32> {
        match perm {
            Some(p) => p
                .iter()
                .copied()
                .filter(|&c| mask[c as usize])
                .collect(),
            None => (0..full_size as u32).filter(|&c| mask[c as usize]).collect(),
        }
    };
    let index_main = ordered(&mask_main, perms.map(|p| p.0));
    let index_shortcut = ordered(&mask_shortcut, perms.map(|p| p.1));
    // canonical pack: main-selected channels in main order, shortcut-only
    // channels in shortcut order, everything else in identity order
    let mut pack: Vec<u32> = Vec::with_capacity(full_size);
    let mut placed = vec![false; full_size];
    for &c in &index_main {
        pack.push(c);
        placed[c as usize] = true;
    }
    for &c in &index_shortcut {
        if !placed[c as usize] {
            pack.push(c);
            placed[c as usize] = true;
        }
    }
    for c in 0..full_size as u32 {
        if !placed[c as usize] {
            pack.push(c);
        }
    }
    let union = mask_main
        .iter()
        .zip(&mask_shortcut)
        .filter(|(&a, &b)| a || b)
        .count();
    build_packed_metadata_checked(full_size, &index_main, &index_shortcut, &pack, union)
}

/// Internal constructor from a known canonical pack.
pub fn build_packed_metadata(
    full_size: usize,
    index_main: &[u32],
    index_shortcut: &[u32],
    pack: &[u32],
    out_count: usize,
) -> JoinMetadata {
    build_packed_metadata_checked(full_size, index_main, index_shortcut, pack, out_count)
        .expect("packed metadata consistent")
}

fn build_packed_metadata_checked(
    full_size: usize,
    index_main: &[u32],
    index_shortcut: &[u32],
    pack: &[u32],
    out_count: usize,
) -> Result<JoinMetadata> {
    let mut packpos = vec![u32::MAX; full_size];
    for (pos, &ident) in pack.iter().enumerate() {
        packpos[ident as usize] = pos as u32;
    }
    let mut mask_main = vec![false; full_size];
    let mut mask_shortcut = vec![false; full_size];
    for &c in index_main {
        mask_main[c as usize] = true;
    }
    for &c in index_shortcut {
        mask_shortcut[c as usize] = true;
    }
    let meta = JoinMetadata {
        full_size,
        mask_main,
        mask_shortcut,
        scatter_main: index_main.iter().map(|&c| packpos[c as usize]).collect(),
        scatter_shortcut: index_shortcut
            .iter()
            .map(|&c| packpos[c as usize])
            .collect(),
        index_main: index_main.to_vec(),
        index_shortcut: index_shortcut.to_vec(),
        pack: pack.to_vec(),
        out_count,
    };
    meta.validate()?;
    Ok(meta)
}

/// Zero-padded elementwise join.
///
/// Allocates a zero tensor over the full pre-pruned channel count, scatters
/// the main path through `index_main` and adds the shortcut through
/// `index_shortcut`, then returns the first `out_count` channels in the
/// canonical packed order.
pub fn zpm_join<E: Element>(
    main: &Tensor<E>,
    shortcut: &Tensor<E>,
    meta: &JoinMetadata,
) -> Result<Tensor<E>> {
    let ms = main.shape();
    let ss = shortcut.shape();
    if ms.channels != meta.index_main.len() || ss.channels != meta.index_shortcut.len() {
        return Err(Error::Dimension {
            at: String::from("zpm_join"),
            detail: alloc::format!(
                "main {} / shortcut {} channels, metadata expects {} / {}",
                ms.channels,
                ss.channels,
                meta.index_main.len(),
                meta.index_shortcut.len()
            ),
        });
    }
    if ms.batch != ss.batch || ms.height != ss.height || ms.width != ss.width {
        return Err(Error::Dimension {
            at: String::from("zpm_join"),
            detail: String::from("main and shortcut spatial shapes differ"),
        });
    }
    let mut full = Tensor::zeros(Shape::new(ms.batch, meta.full_size, ms.height, ms.width));
    crate::net::scatter_add_channels(&mut full, main, Some(&meta.index_main));
    crate::net::scatter_add_channels(&mut full, shortcut, Some(&meta.index_shortcut));
    // pack the canonical prefix
    let mut out = Tensor::zeros(Shape::new(ms.batch, meta.out_count, ms.height, ms.width));
    let spatial = ms.spatial();
    for b in 0..ms.batch {
        for q in 0..meta.out_count {
            let ident = meta.pack[q] as usize;
            let src = full.offset(b, ident, 0, 0);
            let dst = out.offset(b, q, 0, 0);
            out.data_mut()[dst..dst + spatial]
                .copy_from_slice(&full.data()[src..src + spatial]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chan_tensor(values: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, values.len(), 1, 1), values.to_vec())
    }

    #[test]
    fn construction_definition_case() {
        // main selects {0,2}, shortcut selects {1,2} of C=4
        let mut meta = build_join_metadata(4, &[0, 2], &[1, 2], None).unwrap();
        // inspect the full identity space by packing all 4 channels
        meta.pack = alloc::vec![0, 1, 2, 3];
        meta.out_count = 4;
        meta.scatter_main = meta.index_main.clone();
        meta.scatter_shortcut = meta.index_shortcut.clone();
        let main = chan_tensor(&[10.0, 20.0]);
        let short = chan_tensor(&[1.0, 2.0]);
        let out = zpm_join(&main, &short, &meta).unwrap();
        assert_eq!(out.data(), &[10.0, 1.0, 22.0, 0.0]);
    }

    #[test]
    fn full_width_join_is_plain_add() {
        let meta = build_join_metadata(3, &[0, 1, 2], &[0, 1, 2], None).unwrap();
        let main = chan_tensor(&[1.0, 2.0, 3.0]);
        let short = chan_tensor(&[0.5, 0.5, 0.5]);
        let out = zpm_join(&main, &short, &meta).unwrap();
        assert_eq!(out.data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn no_scs_prefix_selections_degenerate_to_prefix_add() {
        // identical prefix selections on both paths
        let meta = build_join_metadata(4, &[0, 1], &[0, 1], None).unwrap();
        assert_eq!(meta.out_count, 2);
        assert_eq!(meta.scatter_main, alloc::vec![0, 1]);
        assert_eq!(meta.scatter_shortcut, alloc::vec![0, 1]);
        let out = zpm_join(&chan_tensor(&[1.0, 2.0]), &chan_tensor(&[3.0, 4.0]), &meta).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn empty_intersection_never_doubles() {
        let meta = build_join_metadata(4, &[0, 3], &[1, 2], None).unwrap();
        let out = zpm_join(&chan_tensor(&[5.0, 7.0]), &chan_tensor(&[11.0, 13.0]), &meta).unwrap();
        // every output channel carries exactly one contribution
        assert_eq!(meta.out_count, 4);
        let mut sorted = out.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(sorted, alloc::vec![5.0, 7.0, 11.0, 13.0]);
    }

    #[test]
    fn four_channel_permutation_enumeration() {
        // perms: main sorted order [2,0,3,1], shortcut sorted order [1,3,0,2]
        // main keeps its top-2 {2,0}, shortcut keeps its top-2 {1,3}
        let perm_main = [2u32, 0, 3, 1];
        let perm_short = [1u32, 3, 0, 2];
        let meta =
            build_join_metadata(4, &[2, 0], &[1, 3], Some((&perm_main, &perm_short))).unwrap();
        assert_eq!(meta.index_main, alloc::vec![2, 0]);
        assert_eq!(meta.index_shortcut, alloc::vec![1, 3]);
        // main packed position p carries identity index_main[p]
        let main = chan_tensor(&[100.0, 200.0]); // identities 2, 0
        let short = chan_tensor(&[10.0, 20.0]); // identities 1, 3
        let out = zpm_join(&main, &short, &meta).unwrap();
        // pack = main order then shortcut-only: [2, 0, 1, 3]
        assert_eq!(meta.pack, alloc::vec![2, 0, 1, 3]);
        assert_eq!(out.data(), &[100.0, 200.0, 10.0, 20.0]);
        // enumerate all 4 identities through the scatter maps
        for (p, &ident) in meta.index_main.iter().enumerate() {
            assert_eq!(meta.pack[meta.scatter_main[p] as usize], ident);
        }
        for (p, &ident) in meta.index_shortcut.iter().enumerate() {
            assert_eq!(meta.pack[meta.scatter_shortcut[p] as usize], ident);
        }
    }

    #[test]
    fn random_masks_match_dense_embedding_oracle() {
        use crate::rng::SeedStream;
        let mut rng = SeedStream::new(42);
        for case in 0..50 {
            let full = 3 + rng.below(6);
            let pick = |rng: &mut SeedStream| -> Vec<u32> {
                let n = 1 + rng.below(full);
                let mut all: Vec<u32> = (0..full as u32).collect();
                rng.shuffle(&mut all);
                let mut sel = all[..n].to_vec();
                sel.sort_unstable();
                sel
            };
            let sel_main = pick(&mut rng);
            let sel_short = pick(&mut rng);
            let meta = build_join_metadata(full, &sel_main, &sel_short, None).unwrap();
            let spatial = 2;
            let mk = |n: usize, rng: &mut SeedStream| {
                let data: Vec<f32> = (0..n * spatial * spatial)
                    .map(|_| rng.uniform(-1.0f32, 1.0))
                    .collect();
                Tensor::from_vec(Shape::new(1, n, spatial, spatial), data)
            };
            let main = mk(sel_main.len(), &mut rng);
            let short = mk(sel_short.len(), &mut rng);
            let got = zpm_join(&main, &short, &meta).unwrap();
            // dense oracle: embed each path into a zero-padded dense tensor
            // by walking identity channels directly, then add plainly
            let mut dense_main = Tensor::<f32>::zeros(Shape::new(1, full, spatial, spatial));
            let mut dense_short = Tensor::<f32>::zeros(Shape::new(1, full, spatial, spatial));
            for (p, &c) in sel_main.iter().enumerate() {
                for y in 0..spatial {
                    for x in 0..spatial {
                        *dense_main.at_mut(0, c as usize, y, x) = main.at(0, p, y, x);
                    }
                }
            }
            for (p, &c) in sel_short.iter().enumerate() {
                for y in 0..spatial {
                    for x in 0..spatial {
                        *dense_short.at_mut(0, c as usize, y, x) = short.at(0, p, y, x);
                    }
                }
            }
            for (q, &ident) in meta.pack[..meta.out_count].iter().enumerate() {
                for y in 0..spatial {
                    for x in 0..spatial {
                        let want = dense_main.at(0, ident as usize, y, x)
                            + dense_short.at(0, ident as usize, y, x);
                        let diff = (got.at(0, q, y, x) - want).abs();
                        assert!(diff <= 1e-6, "case {case}: channel {q} differs by {diff}");
                    }
                }
            }
        }
    }
}

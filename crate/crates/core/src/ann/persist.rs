//! Little-endian index file.
//!
//! ```text
//! magic "AJF1" | version u32 | dim u32 | item count u64 | n_trees u32
//! items:  count x (id u64, dim x f32)
//! trees:  preorder nodes, per tree
//!         tag u8 = 0: internal, normal dim x f32, offset f32, then left subtree, then right subtree
//!         tag u8 = 1: leaf, count u32, ids count x u64
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use super::{AnnForest, Node, Tree};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: [u8; 4] = *b"AJF1";
pub const INDEX_VERSION: u32 = 1;

const TAG_SPLIT: u8 = 0;
const TAG_LEAF: u8 = 1;

pub fn save_index<W: Write>(forest: &AnnForest, mut sink: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(forest.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(forest.ids.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(forest.trees.len() as u32).to_le_bytes());
    for (i, id) in forest.ids.iter().enumerate() {
        buf.extend_from_slice(&id.to_le_bytes());
        for v in forest.vector(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for tree in forest.trees() {
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            match &tree.nodes[n as usize] {
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    buf.push(TAG_SPLIT);
                    for v in normal {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    buf.extend_from_slice(&offset.to_le_bytes());
                    stack.push(*right);
                    stack.push(*left);
                }
                Node::Leaf(items) => {
                    buf.push(TAG_LEAF);
                    buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
                    for &i in items {
                        buf.extend_from_slice(&forest.ids[i as usize].to_le_bytes());
                    }
                }
            }
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn load_index<R: Read>(mut source: R) -> Result<AnnForest> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_index(&bytes)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::format("index file is truncated"))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite value"));
        }
        Ok(out)
    }
}

/// Parses and validates an index held in memory. Never panics on malformed input.
pub fn parse_index(bytes: &[u8]) -> Result<AnnForest> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(4)? != INDEX_MAGIC {
        return Err(Error::format("bad magic bytes"));
    }
    let version = cur.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: INDEX_VERSION,
        });
    }
    let dim = cur.u32()? as usize;
    let count = cur.u64()?;
    let n_trees = cur.u32()? as usize;
    if dim == 0 || count == 0 || n_trees == 0 {
        return Err(Error::format("dim, item count and tree count must be non-zero"));
    }
    let record = 8 + 4 * dim as u64;
    if count.checked_mul(record).is_none_or(|b| b > cur.remaining() as u64) || count > u64::from(u32::MAX) {
        return Err(Error::format("item table exceeds file size"));
    }
    let count = count as usize;

    let mut ids = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * dim);
    let mut index_of = HashMap::with_capacity(count);
    for i in 0..count {
        let id = cur.u64()?;
        if index_of.insert(id, i as u32).is_some() {
            return Err(Error::format(format!("duplicate item id {id}")));
        }
        ids.push(id);
        vectors.extend(cur.f32s(dim)?);
    }

    // each tree needs at least a leaf tag, count and one id
    if n_trees > cur.remaining() / 13 {
        return Err(Error::format("tree count exceeds file size"));
    }
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        trees.push(parse_tree(&mut cur, dim, count, &index_of)?);
    }
    if cur.remaining() != 0 {
        return Err(Error::format("trailing bytes after last tree"));
    }
    Ok(AnnForest::from_parts(dim, ids, vectors, trees))
}

fn parse_tree(cur: &mut Cursor, dim: usize, count: usize, index_of: &HashMap<u64, u32>) -> Result<Tree> {
    let mut nodes: Vec<Node> = vec![Node::Leaf(Vec::new())];
    let mut seen = vec![false; count];
    let mut placed = 0usize;
    // slots still waiting for their subtree, in preorder
    let mut pending = vec![0usize];
    while let Some(slot) = pending.pop() {
        if nodes.len() > 2 * count {
            return Err(Error::format("tree has more nodes than items allow"));
        }
        match cur.u8()? {
            TAG_SPLIT => {
                let normal = cur.f32s(dim)?;
                if normal.iter().all(|v| *v == 0.0) {
                    return Err(Error::format("zero hyperplane normal"));
                }
                let offset = cur.f32s(1)?[0];
                let (l, r) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf(Vec::new()));
                nodes.push(Node::Leaf(Vec::new()));
                nodes[slot] = Node::Split {
                    normal,
                    offset,
                    left: l as u32,
                    right: r as u32,
                };
                pending.push(r);
                pending.push(l);
            }
            TAG_LEAF => {
                let n = cur.u32()? as usize;
                if n == 0 || n > count - placed {
                    return Err(Error::format("bad leaf size"));
                }
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    let id = cur.u64()?;
                    let &i = index_of
                        .get(&id)
                        .ok_or_else(|| Error::format(format!("leaf refers to unknown id {id}")))?;
                    if std::mem::replace(&mut seen[i as usize], true) {
                        return Err(Error::format(format!("id {id} appears twice in one tree")));
                    }
                    items.push(i);
                }
                placed += n;
                nodes[slot] = Node::Leaf(items);
            }
            tag => return Err(Error::format(format!("unknown node tag {tag}"))),
        }
    }
    if placed != count {
        return Err(Error::format("tree does not cover every item"));
    }
    Ok(Tree { nodes })
}

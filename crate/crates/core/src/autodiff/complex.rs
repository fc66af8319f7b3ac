use super::{AutodiffError, NodeId, Tape, Tensor};

/// Complex matrix on a tape, stored as a pair of real nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CNode {
    pub re: NodeId,
    pub im: NodeId,
}

impl CNode {
    pub fn constant(tape: &mut Tape, re: Tensor, im: Tensor) -> Self {
        Self {
            re: tape.constant(re),
            im: tape.constant(im),
        }
    }

    pub fn leaf(tape: &mut Tape, re: Tensor, im: Tensor) -> Self {
        Self {
            re: tape.leaf(re),
            im: tape.leaf(im),
        }
    }

    /// `self · rhs`.
    pub fn matmul(self, tape: &mut Tape, rhs: CNode) -> Result<CNode, AutodiffError> {
        let rr = tape.matmul(self.re, rhs.re)?;
        let ii = tape.matmul(self.im, rhs.im)?;
        let ri = tape.matmul(self.re, rhs.im)?;
        let ir = tape.matmul(self.im, rhs.re)?;
        Ok(CNode {
            re: tape.sub(rr, ii)?,
            im: tape.add(ri, ir)?,
        })
    }

    pub fn add(self, tape: &mut Tape, rhs: CNode) -> Result<CNode, AutodiffError> {
        Ok(CNode {
            re: tape.add(self.re, rhs.re)?,
            im: tape.add(self.im, rhs.im)?,
        })
    }

    /// Multiply both parts by a one-element real node.
    pub fn scale_by(self, tape: &mut Tape, s: NodeId) -> Result<CNode, AutodiffError> {
        Ok(CNode {
            re: tape.scale_by(self.re, s)?,
            im: tape.scale_by(self.im, s)?,
        })
    }

    /// `Re tr(self)`.
    pub fn re_trace(self, tape: &mut Tape) -> Result<NodeId, AutodiffError> {
        tape.trace(self.re)
    }

    /// `‖self‖_F²`.
    pub fn fro_sq(self, tape: &mut Tape) -> Result<NodeId, AutodiffError> {
        let a = tape.sum_squares(self.re);
        let b = tape.sum_squares(self.im);
        tape.add(a, b)
    }

    /// `Re tr(self · rhsᴴ)`.
    pub fn re_inner(self, tape: &mut Tape, rhs: CNode) -> Result<NodeId, AutodiffError> {
        let a = tape.dot(self.re, rhs.re)?;
        let b = tape.dot(self.im, rhs.im)?;
        tape.add(a, b)
    }
}

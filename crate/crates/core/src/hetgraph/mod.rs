//! Typed heterogeneous graph over users, texts and communities.
//!
//! Three node types and six relations: three forward relations and their
//! reverses. Adjacency is stored per relation in CSR form and the reverse of
//! every edge is always present.

mod graph;
mod io;
mod sample;

pub use graph::{Csr, HetGraph};
pub use io::{read_graph, write_graph, GRAPH_MAGIC};
pub use sample::{Fanouts, Subgraph};

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeType {
    User,
    Text,
    Community,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::User, NodeType::Text, NodeType::Community];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::User => "user",
            NodeType::Text => "text",
            NodeType::Community => "community",
        }
    }

    pub fn from_name(s: &str) -> Option<NodeType> {
        NodeType::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A node identified by its type and its dense per-type index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub node_type: NodeType,
    pub index: usize,
}

impl NodeRef {
    pub fn new(node_type: NodeType, index: usize) -> Self {
        NodeRef { node_type, index }
    }

    pub fn user(index: usize) -> Self {
        Self::new(NodeType::User, index)
    }

    pub fn text(index: usize) -> Self {
        Self::new(NodeType::Text, index)
    }

    pub fn community(index: usize) -> Self {
        Self::new(NodeType::Community, index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    /// text → community
    TextPostedInCommunity,
    /// user → community
    UserActiveInCommunity,
    /// text → user
    TextPostedByUser,
    /// community → text
    CommunityContainsText,
    /// community → user
    CommunityHasMember,
    /// user → text
    UserAuthoredText,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::TextPostedInCommunity,
        Relation::UserActiveInCommunity,
        Relation::TextPostedByUser,
        Relation::CommunityContainsText,
        Relation::CommunityHasMember,
        Relation::UserAuthoredText,
    ];

    pub const FORWARD: [Relation; 3] = [
        Relation::TextPostedInCommunity,
        Relation::UserActiveInCommunity,
        Relation::TextPostedByUser,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn reverse(self) -> Relation {
        use Relation::*;
        match self {
            TextPostedInCommunity => CommunityContainsText,
            UserActiveInCommunity => CommunityHasMember,
            TextPostedByUser => UserAuthoredText,
            CommunityContainsText => TextPostedInCommunity,
            CommunityHasMember => UserActiveInCommunity,
            UserAuthoredText => TextPostedByUser,
        }
    }

    pub fn is_forward(self) -> bool {
        self.index() < 3
    }

    pub fn src_type(self) -> NodeType {
        use Relation::*;
        match self {
            TextPostedInCommunity | TextPostedByUser => NodeType::Text,
            UserActiveInCommunity | UserAuthoredText => NodeType::User,
            CommunityContainsText | CommunityHasMember => NodeType::Community,
        }
    }

    pub fn dst_type(self) -> NodeType {
        self.reverse().src_type()
    }

    pub fn name(self) -> &'static str {
        use Relation::*;
        match self {
            TextPostedInCommunity => "text_posted_in_community",
            UserActiveInCommunity => "user_active_in_community",
            TextPostedByUser => "text_posted_by_user",
            CommunityContainsText => "community_contains_text",
            CommunityHasMember => "community_has_member",
            UserAuthoredText => "user_authored_text",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_is_an_involution_with_swapped_types() {
        for r in Relation::ALL {
            assert_eq!(r.reverse().reverse(), r);
            assert_ne!(r.reverse(), r);
            assert_eq!(r.src_type(), r.reverse().dst_type());
            assert_ne!(r.src_type(), r.dst_type());
            assert_eq!(Relation::ALL[r.index()], r);
        }
        assert!(Relation::FORWARD.iter().all(|r| r.is_forward()));
        assert!(Relation::FORWARD.iter().all(|r| !r.reverse().is_forward()));
    }
}

use crate::blockstore::{Site, VolumeId};
use crate::error::{Error, Result};
use crate::replication::{
    GroupId, MemberPair, ReplicationEngine, ReplicationIo, ReplicationMode, SnapshotGroup,
};

/// What a plugin call may touch: the storage arrays and the network.
pub struct PluginCtx<'a> {
    pub engine: &'a mut ReplicationEngine,
    pub io: &'a mut dyn ReplicationIo,
}

/// The only way the control plane reaches storage.
pub trait StoragePlugin {
    fn name(&self) -> &str;

    fn provision_volume(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        site: Site,
        block_count: usize,
        block_size: usize,
    ) -> Result<VolumeId>;

    fn configure_replication(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        member_volume_ids: &[VolumeId],
        mode: ReplicationMode,
    ) -> Result<GroupId>;

    fn backup_peers(&self, ctx: &PluginCtx<'_>, group: GroupId) -> Result<Vec<MemberPair>>;

    fn create_snapshot_group(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        group: GroupId,
    ) -> Result<SnapshotGroup>;
}

/// Plugin backed by the in-process replication engine.
#[derive(Debug, Clone)]
pub struct EnginePlugin {
    journal_capacity: usize,
}

impl EnginePlugin {
    pub const NAME: &'static str = "block-replication";

    pub fn new(journal_capacity: usize) -> Self {
        EnginePlugin { journal_capacity }
    }

    fn wrap<T>(r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::wrap_plugin(Self::NAME, e))
    }
}

impl StoragePlugin for EnginePlugin {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn provision_volume(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        site: Site,
        block_count: usize,
        block_size: usize,
    ) -> Result<VolumeId> {
        Self::wrap(
            ctx.engine
                .store_mut(site)
                .create_volume(block_count, block_size),
        )
    }

    fn configure_replication(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        member_volume_ids: &[VolumeId],
        mode: ReplicationMode,
    ) -> Result<GroupId> {
        Self::wrap(
            ctx.engine
                .create_group(ctx.io, member_volume_ids, mode, self.journal_capacity),
        )
    }

    fn backup_peers(&self, ctx: &PluginCtx<'_>, group: GroupId) -> Result<Vec<MemberPair>> {
        Self::wrap(ctx.engine.group_info(group).map(|g| g.members))
    }

    fn create_snapshot_group(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        group: GroupId,
    ) -> Result<SnapshotGroup> {
        Self::wrap(ctx.engine.create_snapshot_group(group))
    }
}

//! Container-platform records and the namespace operator.
//!
//! Namespaces group applications, applications own volume claims, claims
//! bind to persistent volumes backed by block-store volumes. Tagging a
//! namespace with [`TRIGGER_TAG_KEY`]=[`TRIGGER_TAG_VALUE`] makes the
//! operator create one replication custom resource for it and configure a
//! consistency group over all of its bound volumes. Storage is reached only
//! through a [`StoragePlugin`].

mod plugin;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::blockstore::{prefixed_id, Site, VolumeId};
use crate::error::{Error, Result};
use crate::replication::{GroupId, ReplicationMode, SnapshotGroup};

pub use plugin::{EnginePlugin, PluginCtx, StoragePlugin};

pub const TRIGGER_TAG_KEY: &str = "backup-policy";
pub const TRIGGER_TAG_VALUE: &str = "ConsistentCopyToCloud";
/// Optional tag overriding the operator's default replication mode.
pub const MODE_TAG_KEY: &str = "backup-mode";

prefixed_id!(AppId, "app");
prefixed_id!(ClaimId, "pvc");
prefixed_id!(PvId, "pv");
prefixed_id!(CrId, "cr");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NamespaceRecord {
    pub name: String,
    pub tags: BTreeMap<String, String>,
    pub app_ids: BTreeSet<AppId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AppRecord {
    pub app_id: AppId,
    pub namespace: String,
    pub name: String,
    pub claim_ids: Vec<ClaimId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClaimSpec {
    pub requested_blocks: usize,
    pub block_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VolumeClaim {
    pub claim_id: ClaimId,
    pub app_id: AppId,
    pub requested_blocks: usize,
    pub block_size: usize,
    pub bound_pv_id: Option<PvId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PersistentVolume {
    pub pv_id: PvId,
    pub site: Site,
    pub volume_id: VolumeId,
    pub bound_claim_id: Option<ClaimId>,
    /// For backup-site PVs: the main-site volume this one replicates.
    pub replica_of: Option<VolumeId>,
}

/// One row of a per-site PV listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PvSummary {
    pub pv_id: PvId,
    pub site: Site,
    pub volume_id: VolumeId,
    pub status: &'static str,
    pub claim_id: Option<ClaimId>,
    pub namespace: Option<String>,
    pub app: Option<String>,
    pub replica_of: Option<VolumeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrStatus {
    Pending,
    Configuring,
    Bound,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicationCr {
    pub cr_id: CrId,
    pub namespace: String,
    pub member_volume_ids: Vec<VolumeId>,
    pub desired_mode: ReplicationMode,
    pub observed_group_id: Option<GroupId>,
    pub status: CrStatus,
    pub reason: Option<String>,
    pub note: Option<String>,
}

/// A change the operator made during one reconcile pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReconcileAction {
    pub namespace: String,
    pub action: String,
}

impl fmt::Display for ReconcileAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.namespace, self.action)
    }
}

pub struct ControlPlane {
    plugin: Box<dyn StoragePlugin + Send>,
    default_mode: ReplicationMode,
    namespaces: BTreeMap<String, NamespaceRecord>,
    apps: BTreeMap<AppId, AppRecord>,
    claims: BTreeMap<ClaimId, VolumeClaim>,
    pvs: BTreeMap<PvId, PersistentVolume>,
    crs: BTreeMap<CrId, ReplicationCr>,
    next_app: u32,
    next_claim: u32,
    next_pv: u32,
    next_cr: u32,
    reconcile_passes: u64,
}

impl fmt::Debug for ControlPlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlPlane")
            .field("plugin", &self.plugin.name())
            .field("namespaces", &self.namespaces.len())
            .field("crs", &self.crs.len())
            .finish()
    }
}

impl ControlPlane {
    pub fn new(plugin: Box<dyn StoragePlugin + Send>, default_mode: ReplicationMode) -> Self {
        ControlPlane {
            plugin,
            default_mode,
            namespaces: BTreeMap::new(),
            apps: BTreeMap::new(),
            claims: BTreeMap::new(),
            pvs: BTreeMap::new(),
            crs: BTreeMap::new(),
            next_app: 1,
            next_claim: 1,
            next_pv: 1,
            next_cr: 1,
            reconcile_passes: 0,
        }
    }

    pub fn plugin_name(&self) -> &str {
        self.plugin.name()
    }

    pub fn default_mode(&self) -> ReplicationMode {
        self.default_mode
    }

    pub fn reconcile_passes(&self) -> u64 {
        self.reconcile_passes
    }

    pub fn create_namespace(&mut self, name: &str) -> Result<&NamespaceRecord> {
        if name.is_empty() {
            return Err(Error::InvalidArgument("namespace name is empty".into()));
        }
        if self.namespaces.contains_key(name) {
            return Err(Error::Conflict(format!("namespace {name} exists")));
        }
        let rec = NamespaceRecord {
            name: name.to_string(),
            tags: BTreeMap::new(),
            app_ids: BTreeSet::new(),
        };
        Ok(self.namespaces.entry(name.to_string()).or_insert(rec))
    }

    pub fn namespace(&self, name: &str) -> Result<&NamespaceRecord> {
        self.namespaces
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("namespace {name}")))
    }

    pub fn namespaces(&self) -> impl Iterator<Item = &NamespaceRecord> {
        self.namespaces.values()
    }

    /// Creates an application with one claim per spec and binds every claim
    /// to a freshly provisioned main-site volume.
    pub fn create_app(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        namespace: &str,
        name: &str,
        claims: &[ClaimSpec],
    ) -> Result<AppRecord> {
        let ns = self.namespace(namespace)?;
        if name.is_empty() {
            return Err(Error::InvalidArgument("app name is empty".into()));
        }
        if ns.app_ids.iter().any(|a| self.apps[a].name == name) {
            return Err(Error::Conflict(format!("app {name} exists in {namespace}")));
        }
        let app_id = AppId(self.next_app);
        self.next_app += 1;
        let mut claim_ids = Vec::with_capacity(claims.len());
        for spec in claims {
            let claim_id = ClaimId(self.next_claim);
            self.next_claim += 1;
            self.claims.insert(
                claim_id,
                VolumeClaim {
                    claim_id,
                    app_id,
                    requested_blocks: spec.requested_blocks,
                    block_size: spec.block_size,
                    bound_pv_id: None,
                },
            );
            claim_ids.push(claim_id);
        }
        let app = AppRecord {
            app_id,
            namespace: namespace.to_string(),
            name: name.to_string(),
            claim_ids,
        };
        self.apps.insert(app_id, app.clone());
        self.namespaces
            .get_mut(namespace)
            .expect("checked above")
            .app_ids
            .insert(app_id);
        self.bind_claims(ctx)?;
        Ok(app)
    }

    /// Adds claims to an existing application and binds them.
    pub fn add_claims(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        app_id: AppId,
        claims: &[ClaimSpec],
    ) -> Result<Vec<ClaimId>> {
        self.app(app_id)?;
        let mut ids = Vec::new();
        for spec in claims {
            let claim_id = ClaimId(self.next_claim);
            self.next_claim += 1;
            self.claims.insert(
                claim_id,
                VolumeClaim {
                    claim_id,
                    app_id,
                    requested_blocks: spec.requested_blocks,
                    block_size: spec.block_size,
                    bound_pv_id: None,
                },
            );
            self.apps
                .get_mut(&app_id)
                .expect("checked")
                .claim_ids
                .push(claim_id);
            ids.push(claim_id);
        }
        self.bind_claims(ctx)?;
        Ok(ids)
    }

    /// Binds every unbound claim to a new main-site PV. Returns how many
    /// claims were bound.
    pub fn bind_claims(&mut self, ctx: &mut PluginCtx<'_>) -> Result<usize> {
        let unbound: Vec<ClaimId> = self
            .claims
            .values()
            .filter(|c| c.bound_pv_id.is_none())
            .map(|c| c.claim_id)
            .collect();
        for claim_id in &unbound {
            let c = &self.claims[claim_id];
            let volume_id =
                self.plugin
                    .provision_volume(ctx, Site::Main, c.requested_blocks, c.block_size)?;
            let pv_id = self.add_pv(Site::Main, volume_id, Some(*claim_id), None);
            self.claims.get_mut(claim_id).expect("exists").bound_pv_id = Some(pv_id);
        }
        Ok(unbound.len())
    }

    fn add_pv(
        &mut self,
        site: Site,
        volume_id: VolumeId,
        bound_claim_id: Option<ClaimId>,
        replica_of: Option<VolumeId>,
    ) -> PvId {
        let pv_id = PvId(self.next_pv);
        self.next_pv += 1;
        self.pvs.insert(
            pv_id,
            PersistentVolume {
                pv_id,
                site,
                volume_id,
                bound_claim_id,
                replica_of,
            },
        );
        pv_id
    }

    pub fn app(&self, id: AppId) -> Result<&AppRecord> {
        self.apps
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("app {id}")))
    }

    pub fn find_app(&self, namespace: &str, name: &str) -> Result<&AppRecord> {
        let ns = self.namespace(namespace)?;
        ns.app_ids
            .iter()
            .map(|a| &self.apps[a])
            .find(|a| a.name == name)
            .ok_or_else(|| Error::NotFound(format!("app {name} in {namespace}")))
    }

    pub fn apps(&self) -> impl Iterator<Item = &AppRecord> {
        self.apps.values()
    }

    pub fn claim(&self, id: ClaimId) -> Result<&VolumeClaim> {
        self.claims
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("claim {id}")))
    }

    /// Main-site volumes backing the app's bound claims, in claim order.
    pub fn app_volumes(&self, id: AppId) -> Result<Vec<VolumeId>> {
        Ok(self
            .app(id)?
            .claim_ids
            .iter()
            .filter_map(|c| self.claims[c].bound_pv_id)
            .map(|pv| self.pvs[&pv].volume_id)
            .collect())
    }

    /// Bound main-site volumes across all apps of a namespace.
    pub fn namespace_volumes(&self, namespace: &str) -> Result<Vec<VolumeId>> {
        let ns = self.namespace(namespace)?;
        let mut out = Vec::new();
        for app in &ns.app_ids {
            out.extend(self.app_volumes(*app)?);
        }
        Ok(out)
    }

    pub fn tag_namespace(&mut self, namespace: &str, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(Error::InvalidArgument("tag key is empty".into()));
        }
        let ns = self
            .namespaces
            .get_mut(namespace)
            .ok_or_else(|| Error::NotFound(format!("namespace {namespace}")))?;
        ns.tags.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn untag_namespace(&mut self, namespace: &str, key: &str) -> Result<bool> {
        let ns = self
            .namespaces
            .get_mut(namespace)
            .ok_or_else(|| Error::NotFound(format!("namespace {namespace}")))?;
        Ok(ns.tags.remove(key).is_some())
    }

    pub fn pvs(&self) -> impl Iterator<Item = &PersistentVolume> {
        self.pvs.values()
    }

    pub fn list_pvs(&self, site: Site) -> Vec<PvSummary> {
        self.pvs
            .values()
            .filter(|pv| pv.site == site)
            .map(|pv| {
                let app = pv
                    .bound_claim_id
                    .map(|c| &self.apps[&self.claims[&c].app_id]);
                PvSummary {
                    pv_id: pv.pv_id,
                    site: pv.site,
                    volume_id: pv.volume_id,
                    status: if pv.bound_claim_id.is_some() {
                        "bound"
                    } else {
                        "available"
                    },
                    claim_id: pv.bound_claim_id,
                    namespace: app.map(|a| a.namespace.clone()),
                    app: app.map(|a| a.name.clone()),
                    replica_of: pv.replica_of,
                }
            })
            .collect()
    }

    pub fn crs(&self) -> impl Iterator<Item = &ReplicationCr> {
        self.crs.values()
    }

    pub fn cr_for(&self, namespace: &str) -> Option<&ReplicationCr> {
        self.crs.values().find(|c| c.namespace == namespace)
    }

    pub fn group_for(&self, namespace: &str) -> Option<GroupId> {
        self.cr_for(namespace).and_then(|c| c.observed_group_id)
    }

    pub fn create_snapshot_group(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        group: GroupId,
    ) -> Result<SnapshotGroup> {
        self.plugin.create_snapshot_group(ctx, group)
    }

    fn is_tagged(ns: &NamespaceRecord) -> bool {
        ns.tags.get(TRIGGER_TAG_KEY).map(String::as_str) == Some(TRIGGER_TAG_VALUE)
    }

    /// One level-triggered pass over every namespace. Returns the changes
    /// made; an empty list means the state is a fixed point.
    pub fn reconcile(&mut self, ctx: &mut PluginCtx<'_>) -> Vec<ReconcileAction> {
        self.reconcile_passes += 1;
        let mut actions = Vec::new();
        let names: Vec<String> = self.namespaces.keys().cloned().collect();
        for name in names {
            self.reconcile_namespace(ctx, &name, &mut actions);
        }
        actions
    }

    fn reconcile_namespace(
        &mut self,
        ctx: &mut PluginCtx<'_>,
        name: &str,
        actions: &mut Vec<ReconcileAction>,
    ) {
        let mut act = |a: String| {
            actions.push(ReconcileAction {
                namespace: name.to_string(),
                action: a,
            })
        };
        let ns = &self.namespaces[name];
        let tagged = Self::is_tagged(ns);
        let mode_tag = ns.tags.get(MODE_TAG_KEY).cloned();
        let cr_id = self.cr_for(name).map(|c| c.cr_id);

        if !tagged {
            if let Some(id) = cr_id {
                let cr = self.crs.get_mut(&id).expect("exists");
                if cr.note.is_none() {
                    cr.note = Some("trigger tag removed; replication left in place".into());
                    act(format!("{id} noted untag"));
                }
            }
            return;
        }

        let members = self.namespace_volumes(name).expect("namespace exists");
        let cr_id = match cr_id {
            Some(id) => id,
            None if members.is_empty() => return,
            None => {
                let desired_mode = match mode_tag.as_deref().map(str::parse) {
                    Some(Ok(m)) => m,
                    _ => self.default_mode,
                };
                let id = CrId(self.next_cr);
                self.next_cr += 1;
                self.crs.insert(
                    id,
                    ReplicationCr {
                        cr_id: id,
                        namespace: name.to_string(),
                        member_volume_ids: members.clone(),
                        desired_mode,
                        observed_group_id: None,
                        status: CrStatus::Pending,
                        reason: None,
                        note: None,
                    },
                );
                act(format!("created {id} with {} volumes", members.len()));
                id
            }
        };

        let cr = self.crs.get_mut(&cr_id).expect("exists");
        if cr.note.take().is_some() {
            act(format!("{cr_id} cleared untag note"));
        }

        match cr.observed_group_id {
            None => {
                if let Some(m) = &mode_tag {
                    if let Err(e) = m.parse::<ReplicationMode>() {
                        let reason = e.to_string();
                        if cr.status != CrStatus::Error || cr.reason.as_ref() != Some(&reason) {
                            cr.status = CrStatus::Error;
                            cr.reason = Some(reason);
                            act(format!("{cr_id} rejected mode tag"));
                        }
                        return;
                    }
                }
                cr.member_volume_ids = members;
                cr.status = CrStatus::Configuring;
                match self
                    .plugin
                    .configure_replication(ctx, &cr.member_volume_ids, cr.desired_mode)
                {
                    Ok(group) => {
                        cr.observed_group_id = Some(group);
                        cr.status = CrStatus::Bound;
                        cr.reason = None;
                        act(format!("{cr_id} bound to {group}"));
                    }
                    Err(e) => {
                        cr.status = CrStatus::Error;
                        cr.reason = Some(e.to_string());
                        act(format!("{cr_id} configuration failed: {e}"));
                        return;
                    }
                }
            }
            Some(group) => {
                let drift: Vec<VolumeId> = members
                    .iter()
                    .filter(|v| !cr.member_volume_ids.contains(v))
                    .copied()
                    .collect();
                if drift.is_empty() {
                    if cr.status != CrStatus::Bound {
                        cr.status = CrStatus::Bound;
                        cr.reason = None;
                        act(format!("{cr_id} recovered"));
                    }
                } else {
                    let listed: Vec<String> = drift.iter().map(|v| v.to_string()).collect();
                    let reason = format!("membership drift: {} not in {group}", listed.join(","));
                    if cr.reason.as_ref() != Some(&reason) {
                        cr.status = CrStatus::Error;
                        cr.reason = Some(reason);
                        act(format!("{cr_id} reported drift"));
                    }
                }
            }
        }

        let group = cr.observed_group_id.expect("bound above");
        let peers = match self.plugin.backup_peers(ctx, group) {
            Ok(p) => p,
            Err(e) => {
                act(format!("{cr_id} peer lookup failed: {e}"));
                return;
            }
        };
        for peer in peers {
            let exists = self
                .pvs
                .values()
                .any(|pv| pv.site == Site::Backup && pv.volume_id == peer.backup);
            if !exists {
                let pv = self.add_pv(Site::Backup, peer.backup, None, Some(peer.main));
                act(format!("created backup {pv} for {}", peer.main));
            }
        }
    }

    /// Cross-record invariants; used by tests and assertions.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for c in self.claims.values() {
            if let Some(pv) = c.bound_pv_id {
                if self.pvs.get(&pv).and_then(|p| p.bound_claim_id) != Some(c.claim_id) {
                    return Err(format!("{} -> {pv} is not mutual", c.claim_id));
                }
            }
        }
        for pv in self.pvs.values() {
            if let Some(c) = pv.bound_claim_id {
                if self.claims.get(&c).and_then(|c| c.bound_pv_id) != Some(pv.pv_id) {
                    return Err(format!("{} -> {c} is not mutual", pv.pv_id));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for cr in self.crs.values() {
            if !seen.insert(&cr.namespace) {
                return Err(format!("two CRs for {}", cr.namespace));
            }
            if (cr.status == CrStatus::Bound) && cr.observed_group_id.is_none() {
                return Err(format!("{} bound without a group", cr.cr_id));
            }
        }
        Ok(())
    }
}
